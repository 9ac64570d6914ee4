//! Line-oriented corpus manifest.
//!
//! ```text
//! CORPUS v1 d_t=<int> d_v=<int>
//! G <id> <sat|drone|ground> "<caption>" <d_v floats>
//! Q <id> <positive_item_id> <d_t floats>
//! ```
//!
//! `#` starts a comment line; blank lines are ignored. Captions escape `"`,
//! `\`, newline, tab and carriage return with a backslash. Floats are written
//! in the shortest form that parses back to the same `f64`.

use std::fmt::Write as _;
use std::path::Path;

use super::{Corpus, Embedding, GalleryItem, Platform, QueryRecord};
use crate::error::{PemoeError, Result};

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| PemoeError::io(path, e))?;
    parse_corpus(&text)
}

pub fn save_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, write_corpus(corpus)).map_err(|e| PemoeError::io(path, e))
}

/// Canonical serialization: header, gallery lines, then query lines.
pub fn write_corpus(corpus: &Corpus) -> String {
    let mut out = format!("CORPUS v1 d_t={} d_v={}\n", corpus.d_t(), corpus.d_v());
    for item in corpus.gallery() {
        write!(out, "G {} {} ", item.id, item.platform.tag()).unwrap();
        write_caption(&mut out, &item.caption);
        write_floats(&mut out, item.image_embedding.as_slice());
        out.push('\n');
    }
    for q in corpus.queries() {
        write!(out, "Q {} {}", q.id, q.positive_item_id).unwrap();
        write_floats(&mut out, q.text_embedding.as_slice());
        out.push('\n');
    }
    out
}

fn write_caption(out: &mut String, caption: &str) {
    out.push('"');
    for c in caption.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out.push('"');
}

fn write_floats(out: &mut String, values: &[f64]) {
    for v in values {
        write!(out, " {v:?}").unwrap();
    }
}

struct RawQuery {
    id: u64,
    positive: u64,
    embedding: Embedding,
}

pub fn parse_corpus(text: &str) -> Result<Corpus> {
    let mut dims: Option<(usize, usize)> = None;
    let mut gallery = Vec::new();
    let mut raw_queries = Vec::new();

    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let err = |message: String| PemoeError::Parse {
            line: line_no,
            message,
        };
        let Some((d_t, d_v)) = dims else {
            dims = Some(parse_header(trimmed).map_err(err)?);
            continue;
        };
        let (kind, rest) = trimmed.split_once(char::is_whitespace).unwrap_or((trimmed, ""));
        match kind {
            "G" => gallery.push(parse_gallery(rest, d_v, line_no)?),
            "Q" => {
                let mut fields = rest.split_whitespace();
                let id = parse_id(fields.next(), "query id").map_err(err)?;
                let positive = parse_id(fields.next(), "positive item id").map_err(err)?;
                let values = parse_floats(fields).map_err(err)?;
                if values.len() != d_t {
                    return Err(err(format!(
                        "dimension mismatch: query {id} has {} values, expected d_t={d_t}",
                        values.len()
                    )));
                }
                raw_queries.push(RawQuery {
                    id,
                    positive,
                    embedding: Embedding::new(values).map_err(|e| err(e.to_string()))?,
                });
            }
            "CORPUS" => return Err(err("repeated header".into())),
            other => return Err(err(format!("unknown record type `{other}`"))),
        }
    }

    let (d_t, d_v) = dims.ok_or(PemoeError::Parse {
        line: 0,
        message: "missing `CORPUS v1` header".into(),
    })?;
    let platform_of: std::collections::HashMap<u64, Platform> =
        gallery.iter().map(|g: &GalleryItem| (g.id, g.platform)).collect();
    let mut queries = Vec::with_capacity(raw_queries.len());
    for rq in raw_queries {
        let Some(&platform) = platform_of.get(&rq.positive) else {
            return Err(PemoeError::DanglingReference {
                query_id: rq.id,
                item_id: rq.positive,
            });
        };
        queries.push(QueryRecord {
            id: rq.id,
            text_embedding: rq.embedding,
            positive_item_id: rq.positive,
            platform,
        });
    }
    Corpus::new(d_t, d_v, gallery, queries)
}

fn parse_header(line: &str) -> std::result::Result<(usize, usize), String> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    match fields.as_slice() {
        ["CORPUS", "v1", dt, dv] => {
            let dim = |f: &str, key: &str| -> std::result::Result<usize, String> {
                f.strip_prefix(key)
                    .and_then(|v| v.parse::<usize>().ok())
                    .filter(|&v| v > 0)
                    .ok_or_else(|| format!("expected `{key}<positive int>`, found `{f}`"))
            };
            Ok((dim(dt, "d_t=")?, dim(dv, "d_v=")?))
        }
        ["CORPUS", version, ..] if *version != "v1" => {
            Err(format!("unsupported corpus version `{version}`"))
        }
        _ => Err(format!("expected `CORPUS v1 d_t=<int> d_v=<int>`, found `{line}`")),
    }
}

fn parse_gallery(rest: &str, d_v: usize, line: usize) -> Result<GalleryItem> {
    let err = |message: String| PemoeError::Parse { line, message };
    let rest = rest.trim_start();
    let (id_str, rest) = rest.split_once(char::is_whitespace).unwrap_or((rest, ""));
    let id = parse_id(Some(id_str), "gallery id").map_err(err)?;
    let rest = rest.trim_start();
    let (platform_str, rest) = rest.split_once(char::is_whitespace).unwrap_or((rest, ""));
    let platform: Platform = platform_str.parse().map_err(|e: PemoeError| err(e.to_string()))?;
    let (caption, rest) = parse_caption(rest.trim_start()).map_err(err)?;
    let values = parse_floats(rest.split_whitespace()).map_err(err)?;
    if values.len() != d_v {
        return Err(err(format!(
            "dimension mismatch: item {id} has {} values, expected d_v={d_v}",
            values.len()
        )));
    }
    Ok(GalleryItem {
        id,
        platform,
        caption,
        image_embedding: Embedding::new(values).map_err(|e| err(e.to_string()))?,
    })
}

fn parse_caption(s: &str) -> std::result::Result<(String, &str), String> {
    let mut chars = s.char_indices();
    if !matches!(chars.next(), Some((_, '"'))) {
        return Err("expected double-quoted caption".into());
    }
    let mut caption = String::new();
    while let Some((i, c)) = chars.next() {
        match c {
            '"' => return Ok((caption, &s[i + 1..])),
            '\\' => match chars.next() {
                Some((_, '"')) => caption.push('"'),
                Some((_, '\\')) => caption.push('\\'),
                Some((_, 'n')) => caption.push('\n'),
                Some((_, 't')) => caption.push('\t'),
                Some((_, 'r')) => caption.push('\r'),
                Some((_, other)) => return Err(format!("unknown escape `\\{other}` in caption")),
                None => break,
            },
            c => caption.push(c),
        }
    }
    Err("unterminated caption".into())
}

fn parse_id(field: Option<&str>, what: &str) -> std::result::Result<u64, String> {
    let f = field.ok_or_else(|| format!("missing {what}"))?;
    f.parse::<u64>()
        .map_err(|_| format!("{what} `{f}` is not a non-negative integer"))
}

fn parse_floats<'a>(fields: impl Iterator<Item = &'a str>) -> std::result::Result<Vec<f64>, String> {
    fields
        .map(|f| {
            f.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| format!("`{f}` is not a finite decimal number"))
        })
        .collect()
}
