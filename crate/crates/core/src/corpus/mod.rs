//! Captioned gallery items, text queries, and their platform stratification.

mod manifest;
mod synthetic;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::ops::{Index, IndexMut};
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{PemoeError, Result};
use crate::rng::SplitMix64;

pub use manifest::{load_corpus, parse_corpus, save_corpus, write_corpus};
pub use synthetic::{generate_synthetic, generate_synthetic_with_truth, SyntheticSpec, SyntheticTruth, MAP_SPREAD, PLATFORM_OFFSET};

/// Imaging platform of a gallery item.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Platform {
    Satellite,
    Drone,
    Ground,
}

impl Platform {
    pub const ALL: [Platform; 3] = [Platform::Satellite, Platform::Drone, Platform::Ground];

    pub fn index(self) -> usize {
        match self {
            Platform::Satellite => 0,
            Platform::Drone => 1,
            Platform::Ground => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Platform> {
        Platform::ALL.get(i).copied()
    }

    /// Short tag used in files and on the command line.
    pub fn tag(self) -> &'static str {
        match self {
            Platform::Satellite => "sat",
            Platform::Drone => "drone",
            Platform::Ground => "ground",
        }
    }
}

impl fmt::Display for Platform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Platform {
    type Err = PemoeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sat" | "satellite" => Ok(Platform::Satellite),
            "drone" => Ok(Platform::Drone),
            "ground" => Ok(Platform::Ground),
            other => Err(PemoeError::invalid(
                "platform",
                format!("unknown platform `{other}` (expected sat, drone or ground)"),
            )),
        }
    }
}

/// One value per platform, indexed by [`Platform`].
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PerPlatform<T>(pub [T; 3]);

impl<T> PerPlatform<T> {
    pub fn from_fn(mut f: impl FnMut(Platform) -> T) -> Self {
        PerPlatform([
            f(Platform::Satellite),
            f(Platform::Drone),
            f(Platform::Ground),
        ])
    }

    pub fn iter(&self) -> impl Iterator<Item = (Platform, &T)> {
        Platform::ALL.into_iter().zip(self.0.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (Platform, &mut T)> {
        Platform::ALL.into_iter().zip(self.0.iter_mut())
    }
}

impl<T> Index<Platform> for PerPlatform<T> {
    type Output = T;

    fn index(&self, p: Platform) -> &T {
        &self.0[p.index()]
    }
}

impl<T> IndexMut<Platform> for PerPlatform<T> {
    fn index_mut(&mut self, p: Platform) -> &mut T {
        &mut self.0[p.index()]
    }
}

/// Fixed feature vector from a frozen encoder. Entries are always finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(PemoeError::NonFinite {
                context: format!("embedding entry {i}"),
            });
        }
        Ok(Embedding(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

impl AsRef<[f64]> for Embedding {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GalleryItem {
    pub id: u64,
    pub platform: Platform,
    pub caption: String,
    pub image_embedding: Embedding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub id: u64,
    pub text_embedding: Embedding,
    pub positive_item_id: u64,
    /// Platform of the positive item. Training bookkeeping only; evaluation
    /// never reads it.
    pub platform: Platform,
}

/// Validated gallery plus queries. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    d_t: usize,
    d_v: usize,
    gallery: Vec<GalleryItem>,
    queries: Vec<QueryRecord>,
    item_index: HashMap<u64, usize>,
}

impl Corpus {
    /// Builds a corpus, checking dimensions, id uniqueness, and that every
    /// query points at an existing item on the same platform.
    pub fn new(
        d_t: usize,
        d_v: usize,
        gallery: Vec<GalleryItem>,
        queries: Vec<QueryRecord>,
    ) -> Result<Self> {
        if d_t == 0 {
            return Err(PemoeError::invalid("d_t", "must be positive"));
        }
        if d_v == 0 {
            return Err(PemoeError::invalid("d_v", "must be positive"));
        }
        let mut item_index = HashMap::with_capacity(gallery.len());
        for (pos, item) in gallery.iter().enumerate() {
            if item.image_embedding.dim() != d_v {
                return Err(PemoeError::dims(
                    format!("image embedding of item {}", item.id),
                    d_v,
                    item.image_embedding.dim(),
                ));
            }
            if item_index.insert(item.id, pos).is_some() {
                return Err(PemoeError::DuplicateId {
                    kind: "gallery item",
                    id: item.id,
                });
            }
        }
        let mut seen = HashSet::with_capacity(queries.len());
        for q in &queries {
            if q.text_embedding.dim() != d_t {
                return Err(PemoeError::dims(
                    format!("text embedding of query {}", q.id),
                    d_t,
                    q.text_embedding.dim(),
                ));
            }
            if !seen.insert(q.id) {
                return Err(PemoeError::DuplicateId {
                    kind: "query",
                    id: q.id,
                });
            }
            let Some(&pos) = item_index.get(&q.positive_item_id) else {
                return Err(PemoeError::DanglingReference {
                    query_id: q.id,
                    item_id: q.positive_item_id,
                });
            };
            if gallery[pos].platform != q.platform {
                return Err(PemoeError::invalid(
                    format!("query {}", q.id),
                    format!(
                        "platform {} differs from its positive item's platform {}",
                        q.platform, gallery[pos].platform
                    ),
                ));
            }
        }
        Ok(Corpus {
            d_t,
            d_v,
            gallery,
            queries,
            item_index,
        })
    }

    pub fn d_t(&self) -> usize {
        self.d_t
    }

    pub fn d_v(&self) -> usize {
        self.d_v
    }

    pub fn gallery(&self) -> &[GalleryItem] {
        &self.gallery
    }

    pub fn queries(&self) -> &[QueryRecord] {
        &self.queries
    }

    pub fn item(&self, id: u64) -> Option<&GalleryItem> {
        self.item_index.get(&id).map(|&i| &self.gallery[i])
    }

    /// Position of an item inside [`Corpus::gallery`].
    pub fn item_position(&self, id: u64) -> Option<usize> {
        self.item_index.get(&id).copied()
    }

    /// Same gallery, different query list. Queries are re-validated.
    pub fn with_queries(&self, queries: Vec<QueryRecord>) -> Result<Corpus> {
        Corpus::new(self.d_t, self.d_v, self.gallery.clone(), queries)
    }

    /// Same queries, captions rewritten by `f`.
    pub fn map_captions(&self, mut f: impl FnMut(&GalleryItem) -> Result<String>) -> Result<Corpus> {
        let gallery = self
            .gallery
            .iter()
            .map(|item| {
                Ok(GalleryItem {
                    caption: f(item)?,
                    ..item.clone()
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Corpus::new(self.d_t, self.d_v, gallery, self.queries.clone())
    }
}

/// Partitions the corpus by platform. Queries follow their positive item.
pub fn stratify(corpus: &Corpus) -> PerPlatform<Corpus> {
    PerPlatform::from_fn(|p| {
        let gallery = corpus
            .gallery
            .iter()
            .filter(|it| it.platform == p)
            .cloned()
            .collect();
        let queries = corpus
            .queries
            .iter()
            .filter(|q| q.platform == p)
            .cloned()
            .collect();
        Corpus::new(corpus.d_t, corpus.d_v, gallery, queries)
            .expect("subset of a valid corpus is valid")
    })
}

/// Splits the query set into (train, validation); both keep the full gallery.
///
/// The validation size is `round(val_fraction * n)` clamped to `[1, n - 1]`.
/// Queries keep their original relative order inside each split.
pub fn split_train_val(corpus: &Corpus, val_fraction: f64, seed: u64) -> Result<(Corpus, Corpus)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(PemoeError::invalid(
            "val_fraction",
            format!("{val_fraction} is outside (0, 1)"),
        ));
    }
    let n = corpus.queries.len();
    if n < 2 {
        return Err(PemoeError::invalid(
            "val_fraction",
            format!("need at least 2 queries to split, corpus has {n}"),
        ));
    }
    let n_val = ((val_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut SplitMix64::new(seed));
    let mut is_val = vec![false; n];
    for &i in &order[..n_val] {
        is_val[i] = true;
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (q, v) in corpus.queries.iter().zip(is_val) {
        if v {
            val.push(q.clone());
        } else {
            train.push(q.clone());
        }
    }
    Ok((corpus.with_queries(train)?, corpus.with_queries(val)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn item(id: u64, platform: Platform) -> GalleryItem {
        GalleryItem {
            id,
            platform,
            caption: format!("item {id}"),
            image_embedding: Embedding::new(vec![id as f64, 1.0]).unwrap(),
        }
    }

    fn query(id: u64, item: &GalleryItem) -> QueryRecord {
        QueryRecord {
            id,
            text_embedding: Embedding::new(vec![0.5]).unwrap(),
            positive_item_id: item.id,
            platform: item.platform,
        }
    }

    fn sample_corpus(counts: [usize; 3], queries_per_item: usize) -> Corpus {
        let mut gallery = Vec::new();
        for (p, &c) in Platform::ALL.iter().zip(counts.iter()) {
            for _ in 0..c {
                gallery.push(item(gallery.len() as u64, *p));
            }
        }
        let mut queries = Vec::new();
        for it in &gallery {
            for _ in 0..queries_per_item {
                queries.push(query(queries.len() as u64, it));
            }
        }
        Corpus::new(1, 2, gallery, queries).unwrap()
    }

    #[test]
    fn stratify_counts() {
        let c = sample_corpus([2, 3, 5], 1);
        let s = stratify(&c);
        assert_eq!(s[Platform::Satellite].gallery().len(), 2);
        assert_eq!(s[Platform::Drone].gallery().len(), 3);
        assert_eq!(s[Platform::Ground].gallery().len(), 5);
        assert_eq!(s[Platform::Ground].queries().len(), 5);
    }

    #[test]
    fn stratify_allows_empty_platform() {
        let c = sample_corpus([0, 2, 1], 2);
        let s = stratify(&c);
        assert!(s[Platform::Satellite].gallery().is_empty());
        assert!(s[Platform::Satellite].queries().is_empty());
    }

    #[test]
    fn rejects_dangling_reference() {
        let g = vec![item(0, Platform::Drone)];
        let mut q = query(0, &g[0]);
        q.positive_item_id = 99;
        let err = Corpus::new(1, 2, g, vec![q]).unwrap_err();
        assert!(matches!(err, PemoeError::DanglingReference { item_id: 99, .. }));
        assert!(err.to_string().contains("99"));
    }

    #[test]
    fn rejects_duplicate_and_dims() {
        let g = vec![item(1, Platform::Drone), item(1, Platform::Ground)];
        assert!(matches!(
            Corpus::new(1, 2, g, vec![]),
            Err(PemoeError::DuplicateId { id: 1, .. })
        ));
        let g = vec![item(1, Platform::Drone)];
        assert!(matches!(
            Corpus::new(1, 3, g, vec![]),
            Err(PemoeError::DimensionMismatch { expected: 3, found: 2, .. })
        ));
    }

    #[test]
    fn rejects_non_finite_embedding() {
        assert!(Embedding::new(vec![1.0, f64::NAN]).is_err());
        assert!(Embedding::new(vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn split_counts_and_determinism() {
        let c = sample_corpus([10, 10, 5], 4);
        assert_eq!(c.queries().len(), 100);
        let (tr, va) = split_train_val(&c, 0.2, 3).unwrap();
        assert_eq!((tr.queries().len(), va.queries().len()), (80, 20));
        assert_eq!(tr.gallery(), c.gallery());
        assert_eq!(va.gallery(), c.gallery());
        let (tr2, va2) = split_train_val(&c, 0.2, 3).unwrap();
        let ids = |c: &Corpus| c.queries().iter().map(|q| q.id).collect::<Vec<_>>();
        assert_eq!(ids(&tr), ids(&tr2));
        assert_eq!(ids(&va), ids(&va2));
        let (_, va3) = split_train_val(&c, 0.2, 4).unwrap();
        assert_ne!(ids(&va), ids(&va3));
    }

    #[test]
    fn split_extreme_fraction_keeps_both_sides() {
        let c = sample_corpus([1, 1, 0], 1);
        let (tr, va) = split_train_val(&c, 0.999, 0).unwrap();
        assert_eq!((tr.queries().len(), va.queries().len()), (1, 1));
        let (tr, va) = split_train_val(&c, 0.001, 0).unwrap();
        assert_eq!((tr.queries().len(), va.queries().len()), (1, 1));
    }

    #[test]
    fn split_rejects_bad_fraction() {
        let c = sample_corpus([2, 0, 0], 1);
        for f in [0.0, 1.0, -0.5, 1.5, f64::NAN] {
            assert!(split_train_val(&c, f, 0).is_err(), "{f}");
        }
    }
}
