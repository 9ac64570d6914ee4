use crate::corpus::Corpus;
use crate::error::{PemoeError, Result};
use crate::model::PeMoeModel;
use crate::pipeline::{split, train_all, ExperimentConfig, Preprocess};
use crate::train::Variant;

use super::{evaluate, EvalReport};

/// One trained ablation configuration.
#[derive(Debug, Clone)]
pub struct AblationRun {
    /// 1-based row number.
    pub row: usize,
    pub variant: Variant,
    pub stage1_report: EvalReport,
    pub report: EvalReport,
    pub model: PeMoeModel,
}

const ROWS: [(&str, Variant, bool); 4] = [
    ("1 unified", Variant::Unified, false),
    ("2 unified+prep", Variant::Unified, true),
    ("3 static-ensemble", Variant::StaticEnsemble, true),
    ("4 gated", Variant::Gated, true),
];

/// Trains and evaluates the four configurations on the validation split:
/// a single unified expert on raw captions, the same after caption
/// preprocessing, three platform experts with equal static weights, and
/// three experts with the learned gate. `config.variant` is ignored.
pub fn run_ablation_detailed(corpus: &Corpus, config: &ExperimentConfig) -> Result<Vec<AblationRun>> {
    let (prepared, _) = config.preprocess.apply(corpus)?;
    let (raw, _) = Preprocess::none().apply(corpus)?;
    let mut runs = Vec::with_capacity(ROWS.len());
    for (row, (label, variant, preprocessed)) in ROWS.iter().enumerate() {
        let source = if *preprocessed { &prepared } else { &raw };
        let cfg = ExperimentConfig {
            variant: *variant,
            ..config.clone()
        };
        let (train, val) = split(source, &cfg)?;
        log::info!("ablation row {}: training {variant}", row + 1);
        let trained = train_all(&train, &cfg)?;
        let fusion = variant.fusion();
        runs.push(AblationRun {
            row: row + 1,
            variant: *variant,
            stage1_report: evaluate(&trained.stage1, fusion, &val, &[], &format!("{label} (stage 1)"))?,
            report: evaluate(&trained.model, fusion, &val, &[], label)?,
            model: trained.model,
        });
    }
    Ok(runs)
}

pub fn run_ablation(corpus: &Corpus, config: &ExperimentConfig) -> Result<Vec<EvalReport>> {
    Ok(run_ablation_detailed(corpus, config)?
        .into_iter()
        .map(|r| r.report)
        .collect())
}

/// Mean gate weight assigned to each query's own platform.
pub fn mean_gate_weight_on_true_platform(model: &PeMoeModel, corpus: &Corpus) -> Result<f64> {
    let queries = corpus.queries();
    if queries.is_empty() {
        return Err(PemoeError::invalid("corpus", "no queries"));
    }
    let mut total = 0.0;
    for q in queries {
        total += model.gate_forward(q.text_embedding.as_slice())?.0[q.platform.index()];
    }
    Ok(total / queries.len() as f64)
}
