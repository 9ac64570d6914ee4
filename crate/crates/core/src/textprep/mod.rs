//! Caption preprocessing: sentence splitting, removal of sentences with
//! directional language, and pluggable caption refinement.

mod refine;

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{PemoeError, Result};

pub use refine::{refine_caption, Refiner};

/// Sentences of a text together with the whitespace between them.
///
/// `separators` has one more entry than `sentences`: leading whitespace,
/// the gaps between sentences, and trailing whitespace. Interleaving the two
/// reproduces the input exactly.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentenceSplit<'a> {
    pub sentences: Vec<&'a str>,
    pub separators: Vec<&'a str>,
}

impl SentenceSplit<'_> {
    pub fn reassemble(&self) -> String {
        let mut out = String::from(self.separators[0]);
        for (s, sep) in self.sentences.iter().zip(&self.separators[1..]) {
            out.push_str(s);
            out.push_str(sep);
        }
        out
    }
}

/// Splits after `.`, `!` or `?` when followed by whitespace or the end of
/// the text. Terminators stay with their sentence; an unterminated tail is
/// its own sentence.
pub fn split_sentences(text: &str) -> Vec<&str> {
    split_with_separators(text).sentences
}

pub fn split_with_separators(text: &str) -> SentenceSplit<'_> {
    let mut sentences = Vec::new();
    let mut separators = Vec::new();
    let mut sep_start = 0;
    let mut sentence_start: Option<usize> = None;
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if c.is_whitespace() {
            continue;
        }
        let start = *sentence_start.get_or_insert_with(|| {
            separators.push(&text[sep_start..i]);
            i
        });
        if matches!(c, '.' | '!' | '?') {
            let end = i + c.len_utf8();
            if chars.peek().is_none_or(|&(_, n)| n.is_whitespace()) {
                sentences.push(&text[start..end]);
                sentence_start = None;
                sep_start = end;
            }
        }
    }
    if let Some(start) = sentence_start {
        let end = text.trim_end().len();
        sentences.push(&text[start..end]);
        sep_start = end;
    }
    separators.push(&text[sep_start..]);
    SentenceSplit {
        sentences,
        separators,
    }
}

/// Lowercase keyword phrases; unique, in file order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeywordList {
    phrases: Vec<String>,
}

impl KeywordList {
    /// Phrases are trimmed, lowercased, and inner whitespace collapsed.
    pub fn new<I, S>(phrases: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for p in phrases {
            let norm = normalize(p.as_ref());
            if norm.is_empty() {
                continue;
            }
            if !seen.insert(norm.clone()) {
                return Err(PemoeError::invalid("keywords", format!("duplicate phrase `{norm}`")));
            }
            out.push(norm);
        }
        if out.is_empty() {
            return Err(PemoeError::invalid("keywords", "keyword list is empty"));
        }
        Ok(KeywordList { phrases: out })
    }

    /// One phrase per line; `#` starts a comment line.
    pub fn parse(text: &str) -> Result<Self> {
        Self::new(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#')),
        )
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| PemoeError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn phrases(&self) -> &[String] {
        &self.phrases
    }

    pub fn contains(&self, phrase: &str) -> bool {
        self.phrases.iter().any(|p| p == phrase)
    }

    /// Whether `sentence` contains any phrase on word boundaries,
    /// ignoring case and runs of whitespace.
    pub fn matches(&self, sentence: &str) -> bool {
        let hay = normalize(sentence);
        self.phrases.iter().any(|p| contains_on_boundary(&hay, p))
    }
}

const DEFAULT_KEYWORDS: [&str; 18] = [
    "north",
    "south",
    "east",
    "west",
    "northeast",
    "northwest",
    "southeast",
    "southwest",
    "left side",
    "right side",
    "to the left",
    "to the right",
    "leftmost",
    "rightmost",
    "upper-left",
    "upper-right",
    "lower-left",
    "lower-right",
];

pub fn default_keyword_list() -> KeywordList {
    KeywordList::new(DEFAULT_KEYWORDS).expect("default list is valid")
}

fn normalize(s: &str) -> String {
    s.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

fn contains_on_boundary(hay: &str, needle: &str) -> bool {
    hay.match_indices(needle).any(|(i, m)| {
        let before = hay[..i].chars().next_back();
        let after = hay[i + m.len()..].chars().next();
        !before.is_some_and(is_word_char) && !after.is_some_and(is_word_char)
    })
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SanitizeReport {
    pub original_sentence_count: usize,
    pub removed_sentence_count: usize,
    pub removed_sentences: Vec<String>,
}

/// Drops every sentence that mentions a keyword and joins the rest with
/// single spaces.
pub fn sanitize_directional(caption: &str, keywords: &KeywordList) -> (String, SanitizeReport) {
    let sentences = split_sentences(caption);
    let mut report = SanitizeReport {
        original_sentence_count: sentences.len(),
        ..Default::default()
    };
    let mut kept = Vec::with_capacity(sentences.len());
    for s in sentences {
        if keywords.matches(s) {
            report.removed_sentences.push(s.to_string());
        } else {
            kept.push(s);
        }
    }
    report.removed_sentence_count = report.removed_sentences.len();
    (kept.join(" "), report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn split_examples() {
        assert_eq!(split_sentences("A big roof. A road."), vec!["A big roof.", "A road."]);
        assert!(split_sentences("").is_empty());
        assert!(split_sentences("   \n").is_empty());
        assert_eq!(split_sentences("No terminator here"), vec!["No terminator here"]);
        assert_eq!(split_sentences("Wow!! Really?  Yes"), vec!["Wow!!", "Really?", "Yes"]);
        assert_eq!(split_sentences("v1.2 is out. ok"), vec!["v1.2 is out.", "ok"]);
    }

    #[test]
    fn separators_reassemble() {
        for text in ["", "  ", " A. B!\n\tC?  tail  ", "x", "a.b. c"] {
            let s = split_with_separators(text);
            assert_eq!(s.separators.len(), s.sentences.len() + 1);
            assert_eq!(s.reassemble(), text);
        }
    }

    #[test]
    fn sanitize_examples() {
        let kw = default_keyword_list();
        let (out, r) = sanitize_directional("A large building. It sits to the north of the river.", &kw);
        assert_eq!(out, "A large building.");
        assert_eq!(r.removed_sentence_count, 1);
        assert_eq!(r.removed_sentences, vec!["It sits to the north of the river."]);

        let (out, r) = sanitize_directional("A red roof and a pool.", &kw);
        assert_eq!(out, "A red roof and a pool.");
        assert_eq!(r.removed_sentence_count, 0);

        let north = KeywordList::new(["north"]).unwrap();
        let (out, r) = sanitize_directional("Northgate mall is busy.", &north);
        assert_eq!(out, "Northgate mall is busy.");
        assert_eq!(r.removed_sentence_count, 0);
    }

    #[test]
    fn phrase_matching_rules() {
        let kw = default_keyword_list();
        assert!(kw.matches("The shed is on the LEFT   side."));
        assert!(kw.matches("Parking at the upper-left."));
        assert!(kw.matches("A north-facing wall."));
        assert!(!kw.matches("The leftovers were eaten."));
        assert!(!kw.matches("Eastwood park."));
        assert!(!kw.matches("A southern style house."));
    }

    #[test]
    fn default_list_contents() {
        let kw = default_keyword_list();
        assert!(kw.contains("north"));
        assert!(kw.contains("left side"));
        assert_eq!(kw.phrases().len(), 18);
        assert_eq!(kw, default_keyword_list());
    }

    #[test]
    fn keyword_file_parsing() {
        let kw = KeywordList::parse("# directions\nNorth\n\n  Left  Side \n").unwrap();
        assert_eq!(kw.phrases(), ["north", "left side"]);
        assert!(KeywordList::parse("north\nNORTH\n").is_err());
        assert!(KeywordList::parse("# nothing\n").is_err());
    }

    fn caption() -> impl Strategy<Value = String> {
        let sentence = prop_oneof![
            "[A-Za-z ]{1,20}[.!?]",
            Just("It lies to the north of the lake.".to_string()),
            Just("The gate is on the Left Side.".to_string()),
            Just("Northgate is busy.".to_string()),
            "[a-z]{1,8}",
        ];
        proptest::collection::vec((sentence, "[ \t\n]{0,3}"), 0..6).prop_map(|parts| {
            parts.into_iter().map(|(s, sep)| format!("{s}{sep}")).collect::<String>()
        })
    }

    proptest! {
        #[test]
        fn sanitize_is_idempotent(c in caption()) {
            let kw = default_keyword_list();
            let (once, _) = sanitize_directional(&c, &kw);
            let (twice, r) = sanitize_directional(&once, &kw);
            prop_assert_eq!(&once, &twice);
            prop_assert_eq!(r.removed_sentence_count, 0);
        }

        #[test]
        fn counts_add_up(c in caption()) {
            let kw = default_keyword_list();
            let (out, r) = sanitize_directional(&c, &kw);
            prop_assert_eq!(r.original_sentence_count, split_sentences(&c).len());
            prop_assert_eq!(r.removed_sentence_count, r.removed_sentences.len());
            prop_assert_eq!(
                split_sentences(&out).len() + r.removed_sentence_count,
                r.original_sentence_count
            );
        }

        #[test]
        fn no_new_characters(c in caption()) {
            let (out, _) = sanitize_directional(&c, &default_keyword_list());
            for ch in out.chars() {
                prop_assert!(ch == ' ' || c.contains(ch));
            }
        }

        #[test]
        fn case_insensitive(c in caption()) {
            let kw = default_keyword_list();
            let (lower, _) = sanitize_directional(&c, &kw);
            let (upper, _) = sanitize_directional(&c.to_uppercase(), &kw);
            prop_assert_eq!(lower.to_uppercase(), upper);
        }

        #[test]
        fn split_reassembles(c in "\\PC{0,60}") {
            prop_assert_eq!(split_with_separators(&c).reassemble(), c);
        }
    }
}
