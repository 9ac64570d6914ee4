//! Two-stage training.
//!
//! Stage 1 runs in two phases. Phase A trains each expert head alone on its
//! platform's queries with the in-batch contrastive loss over that expert's
//! own score. Phase B trains only the gate, on mixed-platform batches, with
//! the contrastive loss over fused scores. Hard negatives are then mined
//! with the Stage-1 model, and Stage 2 optimizes the triplet hinge over
//! fused scores with the gate and experts updated jointly.
//!
//! Batch orders come from seeds derived from `TrainConfig::seed`:
//! `batching.stage1.A.<platform>`, `batching.stage1.B`, `batching.stage2`.

mod adamw;
mod backward;
mod gradcheck;
mod loss;

use std::collections::{BTreeSet, HashMap, HashSet, VecDeque};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;

use crate::config::KeyValues;
use crate::corpus::{stratify, Corpus, PerPlatform, Platform, QueryRecord};
use crate::error::{PemoeError, Result};
use crate::model::{score_matrix, Fusion, PeMoeModel};
use crate::rng::{derive_seed, SplitMix64};

pub use adamw::{adamw_step, AdamW, Moments, Optimizer, Trainable};
pub use backward::{batch_loss, compute_gradients, kink_arguments, Batch, GradientSet, LossKind, Objective};
pub use gradcheck::{
    finite_diff_check, relative_error, GradCheckConfig, GradCheckInstance, GradCheckReport, ParamCheck,
    KINK_TOLERANCE,
};
pub use loss::{info_nce_loss, info_nce_with_grad, triplet_loss};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub temperature: f64,
    pub triplet_margin: f64,
    pub negatives_per_query: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage1_epochs: 200,
            stage2_epochs: 10,
            batch_size: 32,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            temperature: 0.1,
            triplet_margin: 0.2,
            negatives_per_query: 4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub const KEYS: [&'static str; 9] = [
        "stage1_epochs",
        "stage2_epochs",
        "batch_size",
        "learning_rate",
        "weight_decay",
        "temperature",
        "triplet_margin",
        "negatives_per_query",
        "seed",
    ];

    /// Reads the training keys from `kv`, falling back to defaults, and
    /// validates the result. Epoch counts must be positive here.
    pub fn from_kv(kv: &mut KeyValues) -> Result<Self> {
        let d = TrainConfig::default();
        let c = TrainConfig {
            stage1_epochs: kv.take_or("stage1_epochs", d.stage1_epochs)?,
            stage2_epochs: kv.take_or("stage2_epochs", d.stage2_epochs)?,
            batch_size: kv.take_or("batch_size", d.batch_size)?,
            learning_rate: kv.take_or("learning_rate", d.learning_rate)?,
            weight_decay: kv.take_or("weight_decay", d.weight_decay)?,
            temperature: kv.take_or("temperature", d.temperature)?,
            triplet_margin: kv.take_or("triplet_margin", d.triplet_margin)?,
            negatives_per_query: kv.take_or("negatives_per_query", d.negatives_per_query)?,
            seed: kv.take_or("seed", d.seed)?,
        };
        for (key, v) in [("stage1_epochs", c.stage1_epochs), ("stage2_epochs", c.stage2_epochs)] {
            if v == 0 {
                return Err(PemoeError::Config {
                    key: key.into(),
                    reason: "must be a positive integer".into(),
                });
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KeyValues::parse(text)?;
        let c = Self::from_kv(&mut kv)?;
        kv.finish()?;
        Ok(c)
    }

    /// Checks everything except the epoch counts, which may be zero when
    /// set programmatically (a zero-epoch stage is a no-op).
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: &str| {
            Err(PemoeError::Config {
                key: key.into(),
                reason: reason.into(),
            })
        };
        if self.batch_size == 0 {
            return bad("batch_size", "must be a positive integer");
        }
        if self.negatives_per_query == 0 {
            return bad("negatives_per_query", "must be a positive integer");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", "must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay", "must be non-negative");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("temperature", "must be positive");
        }
        if !(self.triplet_margin > 0.0 && self.triplet_margin.is_finite()) {
            return bad("triplet_margin", "must be positive");
        }
        Ok(())
    }

    fn optimizer(&self) -> AdamW {
        AdamW::new(self.learning_rate, self.weight_decay)
    }
}

/// Model family being trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// One expert (the satellite slot) trained on every platform.
    Unified,
    /// Three platform experts averaged with equal weights.
    StaticEnsemble,
    /// Three platform experts fused by the learned gate.
    Gated,
}

impl Variant {
    pub fn fusion(self) -> Fusion {
        match self {
            Variant::Unified => Fusion::Single(Platform::Satellite),
            Variant::StaticEnsemble => Fusion::equal(),
            Variant::Gated => Fusion::Gated,
        }
    }

    fn joint_trainable(self) -> Trainable {
        match self {
            Variant::Unified => Trainable::experts([true, false, false]),
            Variant::StaticEnsemble => Trainable::experts([true; 3]),
            Variant::Gated => Trainable::all(),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Unified => "unified",
            Variant::StaticEnsemble => "static",
            Variant::Gated => "gated",
        })
    }
}

impl FromStr for Variant {
    type Err = PemoeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unified" => Ok(Variant::Unified),
            "static" => Ok(Variant::StaticEnsemble),
            "gated" => Ok(Variant::Gated),
            _ => Err(PemoeError::invalid(
                "variant",
                format!("`{s}` (expected unified, static or gated)"),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    A,
    B,
    Stage2,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::A => "A",
            Phase::B => "B",
            Phase::Stage2 => "stage2",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogEntry {
    /// 1-based.
    pub epoch: usize,
    pub phase: Phase,
    /// Set for Phase A.
    pub expert: Option<Platform>,
    /// Mean batch loss of the epoch.
    pub loss: f64,
}

impl fmt::Display for LogEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "epoch={} phase={} loss={:.6}", self.epoch, self.phase, self.loss)?;
        if let Some(p) = self.expert {
            write!(f, " expert={p}")?;
        }
        Ok(())
    }
}

/// Ids of the queries and gallery items an expert read during Phase A.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AccessLog {
    pub query_ids: BTreeSet<u64>,
    pub item_ids: BTreeSet<u64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub entries: Vec<LogEntry>,
    pub phase_a_access: PerPlatform<AccessLog>,
}

impl TrainLog {
    pub fn render(&self) -> String {
        self.entries.iter().map(|e| format!("{e}\n")).collect()
    }

    /// Epoch losses of one phase (and expert, for Phase A) in order.
    pub fn losses(&self, phase: Phase, expert: Option<Platform>) -> Vec<f64> {
        self.entries
            .iter()
            .filter(|e| e.phase == phase && e.expert == expert)
            .map(|e| e.loss)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Triplet {
    pub query_id: u64,
    pub positive_item_id: u64,
    pub negative_item_id: u64,
}

/// Splits queries into batches in which no two queries share a positive
/// item, so every off-diagonal pair of a contrastive batch is a true
/// negative. Queries are shuffled, then packed greedily; a query whose
/// positive is already in the open batch waits for the next one.
pub fn contrastive_batches(queries: &[QueryRecord], batch_size: usize, rng: &mut SplitMix64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..queries.len()).collect();
    order.shuffle(rng);
    let mut pending: VecDeque<usize> = order.into();
    let mut batches = Vec::new();
    while !pending.is_empty() {
        let mut batch = Vec::with_capacity(batch_size);
        let mut seen = HashSet::new();
        let mut rest = VecDeque::with_capacity(pending.len());
        for i in pending {
            if batch.len() < batch_size && seen.insert(queries[i].positive_item_id) {
                batch.push(i);
            } else {
                rest.push_back(i);
            }
        }
        batches.push(batch);
        pending = rest;
    }
    batches
}

/// Stage 1. `model.temperature` is the contrastive temperature. With
/// `stage1_epochs == 0` the model is untouched and the log is empty.
pub fn train_stage1(
    model: &mut PeMoeModel,
    corpus: &Corpus,
    config: &TrainConfig,
    variant: Variant,
) -> Result<TrainLog> {
    config.validate()?;
    let mut log = TrainLog::default();
    if config.stage1_epochs == 0 {
        return Ok(log);
    }
    let subsets: Vec<(Platform, Corpus)> = match variant {
        Variant::Unified => vec![(Platform::Satellite, corpus.clone())],
        _ => stratify(corpus).0.into_iter().zip(Platform::ALL).map(|(c, p)| (p, c)).collect(),
    };
    for (p, subset) in &subsets {
        if subset.queries().is_empty() {
            log::warn!("no training queries for platform {p}; expert left at initialization");
            continue;
        }
        let seed = derive_seed(config.seed, &format!("batching.stage1.A.{}", p.tag()));
        let objective = Objective {
            fusion: Fusion::Single(*p),
            loss: LossKind::InfoNce,
        };
        let mut mask = [false; 3];
        mask[p.index()] = true;
        let access = &mut log.phase_a_access[*p];
        let entries = contrastive_epochs(
            model,
            subset,
            config,
            objective,
            Trainable::experts(mask),
            seed,
            Some(access),
        )?;
        log.entries.extend(entries.into_iter().enumerate().map(|(e, loss)| LogEntry {
            epoch: e + 1,
            phase: Phase::A,
            expert: Some(*p),
            loss,
        }));
    }
    if variant == Variant::Gated {
        let objective = Objective {
            fusion: Fusion::Gated,
            loss: LossKind::InfoNce,
        };
        let seed = derive_seed(config.seed, "batching.stage1.B");
        let entries = contrastive_epochs(model, corpus, config, objective, Trainable::gate_only(), seed, None)?;
        log.entries.extend(entries.into_iter().enumerate().map(|(e, loss)| LogEntry {
            epoch: e + 1,
            phase: Phase::B,
            expert: None,
            loss,
        }));
    }
    Ok(log)
}

fn contrastive_epochs(
    model: &mut PeMoeModel,
    corpus: &Corpus,
    config: &TrainConfig,
    objective: Objective,
    trainable: Trainable,
    seed: u64,
    mut access: Option<&mut AccessLog>,
) -> Result<Vec<f64>> {
    let mut rng = SplitMix64::new(seed);
    let mut opt = Optimizer::new(model, config.optimizer(), trainable);
    let queries = corpus.queries();
    let mut epoch_losses = Vec::with_capacity(config.stage1_epochs);
    for _ in 0..config.stage1_epochs {
        let batches = contrastive_batches(queries, config.batch_size, &mut rng);
        let mut total = 0.0;
        for idx in &batches {
            let texts: Vec<&[f64]> = idx.iter().map(|&i| queries[i].text_embedding.as_slice()).collect();
            let images: Vec<&[f64]> = idx
                .iter()
                .map(|&i| {
                    let item = corpus.item(queries[i].positive_item_id).expect("validated corpus");
                    if let Some(a) = access.as_deref_mut() {
                        a.query_ids.insert(queries[i].id);
                        a.item_ids.insert(item.id);
                    }
                    item.image_embedding.as_slice()
                })
                .collect();
            let (loss, grads) = compute_gradients(model, &Batch::Pairs { texts, images }, &objective)?;
            opt.step(model, &grads)?;
            total += loss;
        }
        epoch_losses.push(total / batches.len() as f64);
    }
    Ok(epoch_losses)
}

/// Where negatives may come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MiningScope {
    #[default]
    FullGallery,
    /// Only items on the query's own platform.
    SamePlatform,
}

impl FromStr for MiningScope {
    type Err = PemoeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(MiningScope::FullGallery),
            "same-platform" => Ok(MiningScope::SamePlatform),
            other => Err(PemoeError::invalid(
                "mining_scope",
                format!("`{other}` (expected full or same-platform)"),
            )),
        }
    }
}

/// For every query (ascending id), the `n_neg` highest-scoring gallery items
/// other than its positive, best first. Equal scores go to the lower id.
pub fn mine_hard_negatives(
    model: &PeMoeModel,
    corpus: &Corpus,
    n_neg: usize,
    fusion: Fusion,
    scope: MiningScope,
) -> Result<Vec<Triplet>> {
    if n_neg == 0 {
        return Err(PemoeError::invalid("negatives_per_query", "must be positive"));
    }
    let gallery = corpus.gallery();
    let mut queries: Vec<&QueryRecord> = corpus.queries().iter().collect();
    queries.sort_by_key(|q| q.id);
    for q in &queries {
        let available = match scope {
            MiningScope::FullGallery => gallery.len(),
            MiningScope::SamePlatform => gallery.iter().filter(|g| g.platform == q.platform).count(),
        };
        if available < n_neg + 1 {
            return Err(PemoeError::invalid(
                "negatives_per_query",
                format!(
                    "{n_neg} negatives need at least {} candidate items, query {} has {available}",
                    n_neg + 1,
                    q.id
                ),
            ));
        }
    }
    let owned: Vec<QueryRecord> = queries.iter().map(|q| (*q).clone()).collect();
    let scores = score_matrix(model, fusion, &owned, gallery)?;
    let mut out = Vec::with_capacity(owned.len() * n_neg);
    for (row, q) in owned.iter().enumerate() {
        let mut candidates: Vec<(f64, u64)> = gallery
            .iter()
            .zip(scores.row(row))
            .filter(|(g, _)| g.id != q.positive_item_id)
            .filter(|(g, _)| scope == MiningScope::FullGallery || g.platform == q.platform)
            .map(|(g, &s)| (s, g.id))
            .collect();
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        out.extend(candidates.iter().take(n_neg).map(|&(_, id)| Triplet {
            query_id: q.id,
            positive_item_id: q.positive_item_id,
            negative_item_id: id,
        }));
    }
    Ok(out)
}

/// Stage 2: mean triplet hinge over fused scores. A batch whose loss is
/// exactly zero skips the optimizer step entirely, weight decay included.
pub fn train_stage2(
    model: &mut PeMoeModel,
    corpus: &Corpus,
    triplets: &[Triplet],
    config: &TrainConfig,
    variant: Variant,
) -> Result<TrainLog> {
    config.validate()?;
    if triplets.is_empty() {
        return Err(PemoeError::invalid("triplets", "stage 2 needs at least one triplet"));
    }
    let queries: HashMap<u64, &QueryRecord> = corpus.queries().iter().map(|q| (q.id, q)).collect();
    let resolved: Vec<(&[f64], &[f64], &[f64])> = triplets
        .iter()
        .map(|t| {
            let q = queries.get(&t.query_id).ok_or_else(|| {
                PemoeError::invalid("triplets", format!("query id {} is not in the corpus", t.query_id))
            })?;
            let item = |id: u64| {
                corpus
                    .item(id)
                    .map(|g| g.image_embedding.as_slice())
                    .ok_or(PemoeError::DanglingReference {
                        query_id: t.query_id,
                        item_id: id,
                    })
            };
            if t.negative_item_id == t.positive_item_id {
                return Err(PemoeError::invalid(
                    "triplets",
                    format!("query {} uses its positive as a negative", t.query_id),
                ));
            }
            Ok((
                q.text_embedding.as_slice(),
                item(t.positive_item_id)?,
                item(t.negative_item_id)?,
            ))
        })
        .collect::<Result<_>>()?;

    let objective = Objective {
        fusion: variant.fusion(),
        loss: LossKind::Triplet {
            margin: config.triplet_margin,
        },
    };
    let mut opt = Optimizer::new(model, config.optimizer(), variant.joint_trainable());
    let mut rng = SplitMix64::new(derive_seed(config.seed, "batching.stage2"));
    let mut order: Vec<usize> = (0..resolved.len()).collect();
    let mut log = TrainLog::default();
    for epoch in 1..=config.stage2_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let chunks: Vec<&[usize]> = order.chunks(config.batch_size).collect();
        for chunk in &chunks {
            let batch = Batch::Triplets {
                texts: chunk.iter().map(|&i| resolved[i].0).collect(),
                positives: chunk.iter().map(|&i| resolved[i].1).collect(),
                negatives: chunk.iter().map(|&i| resolved[i].2).collect(),
            };
            let (loss, grads) = compute_gradients(model, &batch, &objective)?;
            if loss > 0.0 {
                opt.step(model, &grads)?;
            }
            total += loss;
        }
        log.entries.push(LogEntry {
            epoch,
            phase: Phase::Stage2,
            expert: None,
            loss: total / chunks.len() as f64,
        });
    }
    Ok(log)
}

/// `T <query_id> <pos_id> <neg_id>` per line.
pub fn write_triplets(triplets: &[Triplet]) -> String {
    triplets
        .iter()
        .map(|t| format!("T {} {} {}\n", t.query_id, t.positive_item_id, t.negative_item_id))
        .collect()
}

pub fn parse_triplets(text: &str) -> Result<Vec<Triplet>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            let bad = |m: &str| PemoeError::Parse {
                line: n + 1,
                message: m.into(),
            };
            let f: Vec<&str> = l.split_whitespace().collect();
            if f.len() != 4 || f[0] != "T" {
                return Err(bad("expected `T <query_id> <pos_id> <neg_id>`"));
            }
            let id = |s: &str| s.parse::<u64>().map_err(|_| bad(&format!("`{s}` is not an id")));
            Ok(Triplet {
                query_id: id(f[1])?,
                positive_item_id: id(f[2])?,
                negative_item_id: id(f[3])?,
            })
        })
        .collect()
}

pub fn save_triplets(triplets: &[Triplet], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, write_triplets(triplets)).map_err(|e| PemoeError::io(path, e))
}

pub fn load_triplets(path: impl AsRef<Path>) -> Result<Vec<Triplet>> {
    let path = path.as_ref();
    parse_triplets(&std::fs::read_to_string(path).map_err(|e| PemoeError::io(path, e))?)
}
