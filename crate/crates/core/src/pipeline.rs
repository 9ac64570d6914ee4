//! End-to-end experiment plumbing: caption preprocessing, the train/val
//! split, model initialization and the Stage 1 -> mining -> Stage 2 chain.
//!
//! Every random stream derives from the training seed:
//! `split` for the train/val partition, `init` for parameters, and the
//! batching seeds listed in [`crate::train`]. Parameters are rounded to
//! `f32` after initialization and after each stage, so a chain resumed from
//! checkpoints is bit-identical to an uninterrupted one.

use crate::corpus::{split_train_val, Corpus, PerPlatform, Platform};
use crate::error::{PemoeError, Result};
use crate::model::{ModelDims, PeMoeModel};
use crate::rng::derive_seed;
use crate::textprep::{default_keyword_list, refine_caption, sanitize_directional, KeywordList, Refiner};
use crate::train::{mine_hard_negatives, train_stage1, train_stage2, MiningScope, TrainConfig, TrainLog, Triplet, Variant};

/// Trainable-head sizes; the input sizes come from the corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadDims {
    pub d_e: usize,
    pub h_g: usize,
    pub h_e: usize,
}

impl Default for HeadDims {
    fn default() -> Self {
        HeadDims {
            d_e: 32,
            h_g: 32,
            h_e: 16,
        }
    }
}

impl HeadDims {
    pub fn for_corpus(&self, corpus: &Corpus) -> ModelDims {
        ModelDims {
            d_t: corpus.d_t(),
            d_v: corpus.d_v(),
            d_e: self.d_e,
            h_g: self.h_g,
            h_e: self.h_e,
        }
    }
}

/// Caption sanitization followed by refinement.
#[derive(Debug, Clone, PartialEq)]
pub struct Preprocess {
    /// Platforms whose captions are sanitized.
    pub sanitize: [bool; 3],
    pub keywords: KeywordList,
    pub refiner: Refiner,
}

impl Default for Preprocess {
    fn default() -> Self {
        Preprocess {
            sanitize: [true; 3],
            keywords: default_keyword_list(),
            refiner: Refiner::Identity,
        }
    }
}

impl Preprocess {
    /// Leaves captions untouched.
    pub fn none() -> Self {
        Preprocess {
            sanitize: [false; 3],
            ..Preprocess::default()
        }
    }

    /// Rewritten corpus and the number of removed sentences per platform.
    pub fn apply(&self, corpus: &Corpus) -> Result<(Corpus, PerPlatform<usize>)> {
        let mut removed = PerPlatform::<usize>::default();
        let out = corpus.map_captions(|item| {
            let caption = if self.sanitize[item.platform.index()] {
                let (c, report) = sanitize_directional(&item.caption, &self.keywords);
                removed[item.platform] += report.removed_sentence_count;
                c
            } else {
                item.caption.clone()
            };
            refine_caption(&caption, item.platform, &self.refiner)
        })?;
        Ok((out, removed))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub heads: HeadDims,
    pub train: TrainConfig,
    pub val_fraction: f64,
    pub preprocess: Preprocess,
    /// Start Stage 2 from a fresh initialization instead of the Stage-1 weights.
    pub from_scratch: bool,
    pub mining_scope: MiningScope,
    pub variant: Variant,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            heads: HeadDims::default(),
            train: TrainConfig::default(),
            val_fraction: 0.2,
            preprocess: Preprocess::default(),
            from_scratch: false,
            mining_scope: MiningScope::FullGallery,
            variant: Variant::Gated,
        }
    }
}

/// `(train, validation)` query split with the `split` seed.
pub fn split(corpus: &Corpus, config: &ExperimentConfig) -> Result<(Corpus, Corpus)> {
    split_train_val(corpus, config.val_fraction, derive_seed(config.train.seed, "split"))
}

pub fn init_model(corpus: &Corpus, config: &ExperimentConfig) -> Result<PeMoeModel> {
    let mut model = PeMoeModel::init(config.heads.for_corpus(corpus), derive_seed(config.train.seed, "init"))?;
    model.temperature = config.train.temperature;
    model.snap_to_f32();
    Ok(model)
}

fn check_dims(model: &PeMoeModel, corpus: &Corpus) -> Result<()> {
    let d = model.dims();
    if d.d_t != corpus.d_t() {
        return Err(PemoeError::dims("model d_t vs corpus", d.d_t, corpus.d_t()));
    }
    if d.d_v != corpus.d_v() {
        return Err(PemoeError::dims("model d_v vs corpus", d.d_v, corpus.d_v()));
    }
    Ok(())
}

pub fn run_stage1(model: &mut PeMoeModel, train: &Corpus, config: &ExperimentConfig) -> Result<TrainLog> {
    check_dims(model, train)?;
    let log = train_stage1(model, train, &config.train, config.variant)?;
    model.snap_to_f32();
    Ok(log)
}

pub fn run_mining(model: &PeMoeModel, train: &Corpus, config: &ExperimentConfig) -> Result<Vec<Triplet>> {
    check_dims(model, train)?;
    mine_hard_negatives(
        model,
        train,
        config.train.negatives_per_query,
        config.variant.fusion(),
        config.mining_scope,
    )
}

/// Stage 2 starting from `stage1` (or from a fresh initialization when
/// `from_scratch` is set).
pub fn run_stage2(
    stage1: &PeMoeModel,
    train: &Corpus,
    triplets: &[Triplet],
    config: &ExperimentConfig,
) -> Result<(PeMoeModel, TrainLog)> {
    check_dims(stage1, train)?;
    let mut model = if config.from_scratch {
        init_model(train, config)?
    } else {
        stage1.clone()
    };
    let log = train_stage2(&mut model, train, triplets, &config.train, config.variant)?;
    model.snap_to_f32();
    Ok((model, log))
}

#[derive(Debug, Clone)]
pub struct TrainedModels {
    pub stage1: PeMoeModel,
    pub stage1_log: TrainLog,
    pub triplets: Vec<Triplet>,
    pub model: PeMoeModel,
    pub stage2_log: TrainLog,
}

/// Initialization, Stage 1, mining and Stage 2 on the training corpus.
pub fn train_all(train: &Corpus, config: &ExperimentConfig) -> Result<TrainedModels> {
    let mut stage1 = init_model(train, config)?;
    let stage1_log = run_stage1(&mut stage1, train, config)?;
    let triplets = run_mining(&stage1, train, config)?;
    let (model, stage2_log) = run_stage2(&stage1, train, &triplets, config)?;
    Ok(TrainedModels {
        stage1,
        stage1_log,
        triplets,
        model,
        stage2_log,
    })
}

pub fn platform_summary(counts: &PerPlatform<usize>) -> String {
    Platform::ALL
        .iter()
        .map(|p| format!("{p}={}", counts[*p]))
        .collect::<Vec<_>>()
        .join(" ")
}
