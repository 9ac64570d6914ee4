//! Gallery ranking and Recall@K.

mod ablation;

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, GalleryItem, QueryRecord};
use crate::error::{PemoeError, Result};
use crate::model::{score_matrix, score_matrix_raw, Fusion, PeMoeModel};

pub use ablation::{mean_gate_weight_on_true_platform, run_ablation, run_ablation_detailed, AblationRun};

/// Cutoffs that every report includes.
pub const STANDARD_KS: [usize; 3] = [1, 5, 10];

/// Footnote attached to every rendered composite score.
pub const COMPOSITE_CAVEAT: &str =
    "* Score: arithmetic mean of R@1, R@5 and R@10. The official competition formula is undocumented, so this is not comparable to published Score values.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ranking {
    pub query_id: u64,
    /// Gallery ids by descending score, ties by ascending id.
    pub items: Vec<u64>,
}

/// Orders `gallery` by `scores` (same positions).
pub fn rank_scores(query_id: u64, scores: &[f64], gallery: &[GalleryItem]) -> Result<Ranking> {
    if gallery.is_empty() {
        return Err(PemoeError::EmptyGallery);
    }
    if scores.len() != gallery.len() {
        return Err(PemoeError::dims("ranking scores", gallery.len(), scores.len()));
    }
    let mut order: Vec<(f64, u64)> = scores.iter().zip(gallery).map(|(&s, g)| (s, g.id)).collect();
    order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    Ok(Ranking {
        query_id,
        items: order.into_iter().map(|(_, id)| id).collect(),
    })
}

pub fn rank_gallery(
    model: &PeMoeModel,
    fusion: Fusion,
    query: &QueryRecord,
    gallery: &[GalleryItem],
) -> Result<Ranking> {
    if gallery.is_empty() {
        return Err(PemoeError::EmptyGallery);
    }
    let images: Vec<&[f64]> = gallery.iter().map(|g| g.image_embedding.as_slice()).collect();
    let scores = score_matrix_raw(model, fusion, &[query.text_embedding.as_slice()], &images)?;
    rank_scores(query.id, scores.row(0), gallery)
}

/// Rankings of every query, in query order.
pub fn rank_all(
    model: &PeMoeModel,
    fusion: Fusion,
    queries: &[QueryRecord],
    gallery: &[GalleryItem],
) -> Result<Vec<Ranking>> {
    if gallery.is_empty() {
        return Err(PemoeError::EmptyGallery);
    }
    let scores = score_matrix(model, fusion, queries, gallery)?;
    queries
        .par_iter()
        .enumerate()
        .map(|(i, q)| rank_scores(q.id, scores.row(i), gallery))
        .collect()
}

/// Fraction of rankings whose positive sits in the first `min(k, |gallery|)` places.
pub fn recall_at_k(rankings: &[Ranking], truth: &HashMap<u64, u64>, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(PemoeError::invalid("k", "must be at least 1"));
    }
    if rankings.is_empty() {
        return Err(PemoeError::invalid("rankings", "no queries to evaluate"));
    }
    let mut hits = 0usize;
    for r in rankings {
        let positive = truth
            .get(&r.query_id)
            .ok_or_else(|| PemoeError::invalid("truth", format!("no positive recorded for query {}", r.query_id)))?;
        if r.items.iter().take(k).any(|id| id == positive) {
            hits += 1;
        }
    }
    Ok(hits as f64 / rankings.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RecallScale {
    /// Fractions in `[0, 1]`.
    Unit,
    /// Percentages in `[0, 100]`.
    Percent,
}

/// Detects the scale of a recall triple. Values above 1 mean percent;
/// mixing those with fractional values strictly between 0 and 1 is an error.
pub fn infer_scale(recalls: &[f64]) -> Result<RecallScale> {
    if let Some(x) = recalls.iter().find(|x| !(x.is_finite() && **x >= 0.0 && **x <= 100.0)) {
        return Err(PemoeError::invalid("recall", format!("{x} is outside [0, 100]")));
    }
    let percent = recalls.iter().any(|&x| x > 1.0);
    let fractional = recalls.iter().any(|&x| x > 0.0 && x < 1.0);
    match (percent, fractional) {
        (true, true) => Err(PemoeError::invalid(
            "recall",
            format!("{recalls:?} mixes [0, 1] and [0, 100] scales"),
        )),
        (true, false) => Ok(RecallScale::Percent),
        (false, _) => Ok(RecallScale::Unit),
    }
}

/// Weighted mean of `(R@1, R@5, R@10)` on the inputs' own scale. Weights
/// must be non-negative and are normalized to sum to one.
pub fn composite_score_weighted(recalls: [f64; 3], weights: [f64; 3]) -> Result<f64> {
    infer_scale(&recalls)?;
    let total: f64 = weights.iter().sum();
    if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) || !(total > 0.0) {
        return Err(PemoeError::invalid("weights", format!("{weights:?}")));
    }
    Ok(recalls.iter().zip(weights).map(|(r, w)| r * w).sum::<f64>() / total)
}

/// Arithmetic mean of `(R@1, R@5, R@10)`.
pub fn composite_score(r1: f64, r5: f64, r10: f64) -> Result<f64> {
    let recalls = [r1, r5, r10];
    infer_scale(&recalls)?;
    Ok((r1 + r5 + r10) / 3.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_label: String,
    pub num_queries: usize,
    /// Recall in `[0, 1]` keyed by cutoff.
    pub r_at: BTreeMap<usize, f64>,
    pub composite_score: f64,
}

impl EvalReport {
    pub fn recall(&self, k: usize) -> f64 {
        self.r_at[&k]
    }

    /// `metric=<name> k=<int> value=<float>` lines. The composite has no
    /// cutoff and is written with `k=0`.
    pub fn metric_lines(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.r_at {
            out.push_str(&format!("metric=recall k={k} value={v:.6}\n"));
        }
        out.push_str(&format!("metric=composite k=0 value={:.6}\n", self.composite_score));
        out
    }
}

/// Evaluates every query of `corpus` against its full gallery. The report
/// always covers R@1, R@5 and R@10 in addition to `extra_ks`.
pub fn evaluate(
    model: &PeMoeModel,
    fusion: Fusion,
    corpus: &Corpus,
    extra_ks: &[usize],
    label: &str,
) -> Result<EvalReport> {
    let rankings = rank_all(model, fusion, corpus.queries(), corpus.gallery())?;
    let truth: HashMap<u64, u64> = corpus.queries().iter().map(|q| (q.id, q.positive_item_id)).collect();
    let mut r_at = BTreeMap::new();
    for &k in STANDARD_KS.iter().chain(extra_ks) {
        r_at.insert(k, recall_at_k(&rankings, &truth, k)?);
    }
    let composite = composite_score(r_at[&1], r_at[&5], r_at[&10])?;
    Ok(EvalReport {
        config_label: label.to_string(),
        num_queries: rankings.len(),
        r_at,
        composite_score: composite,
    })
}

/// Fixed-width table, recalls and score rendered x100 with two decimals,
/// followed by the composite caveat.
pub fn render_table(reports: &[EvalReport]) -> String {
    let mut ks: Vec<usize> = reports.iter().flat_map(|r| r.r_at.keys().copied()).collect();
    ks.sort_unstable();
    ks.dedup();
    let width = reports
        .iter()
        .map(|r| r.config_label.len())
        .max()
        .unwrap_or(0)
        .max("config".len());
    let mut out = format!("{:<width$}", "config");
    for k in &ks {
        out.push_str(&format!(" {:>7}", format!("R@{k}")));
    }
    out.push_str(&format!(" {:>7}\n", "Score*"));
    for r in reports {
        out.push_str(&format!("{:<width$}", r.config_label));
        for k in &ks {
            match r.r_at.get(k) {
                Some(v) => out.push_str(&format!(" {:>7.2}", v * 100.0)),
                None => out.push_str(&format!(" {:>7}", "-")),
            }
        }
        out.push_str(&format!(" {:>7.2}\n", r.composite_score * 100.0));
    }
    out.push_str(COMPOSITE_CAVEAT);
    out.push('\n');
    out
}

pub fn reports_to_json(reports: &[EvalReport]) -> String {
    serde_json::to_string_pretty(reports).expect("reports serialize") + "\n"
}
