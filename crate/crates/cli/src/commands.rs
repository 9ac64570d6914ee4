use std::fs;
use std::path::{Path, PathBuf};

use pemoe::corpus::{generate_synthetic, load_corpus, save_corpus, SyntheticSpec};
use pemoe::eval::{evaluate, render_table, reports_to_json, run_ablation_detailed, EvalReport};
use pemoe::model::{load_checkpoint, save_checkpoint};
use pemoe::pipeline::{init_model, platform_summary, run_mining, run_stage1, run_stage2, split, train_all};
use pemoe::textprep::{default_keyword_list, sanitize_directional, KeywordList};
use pemoe::train::{load_triplets, save_triplets, GradCheckConfig, GradCheckInstance, LossKind, TrainLog};
use pemoe::{Corpus, Fusion, PemoeError, PerPlatform, Result};

use crate::pipeline_config::PipelineConfig;

pub const STAGE1_CHECKPOINT: &str = "stage1.ckpt";
pub const STAGE1_LOG: &str = "stage1.log";
pub const TRIPLETS: &str = "triplets.txt";
pub const CHECKPOINT: &str = "model.ckpt";
pub const STAGE2_LOG: &str = "stage2.log";

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| PemoeError::io(path, e))
}

fn corpus_summary(corpus: &Corpus) -> String {
    let gallery = PerPlatform::from_fn(|p| corpus.gallery().iter().filter(|g| g.platform == p).count());
    let queries = PerPlatform::from_fn(|p| corpus.queries().iter().filter(|q| q.platform == p).count());
    format!(
        "gallery {} ({}), queries {} ({})",
        corpus.gallery().len(),
        platform_summary(&gallery),
        corpus.queries().len(),
        platform_summary(&queries)
    )
}

pub fn gen(spec: &SyntheticSpec, out: &Path) -> Result<()> {
    let corpus = generate_synthetic(spec)?;
    save_corpus(&corpus, out)?;
    println!("wrote {}: {}", out.display(), corpus_summary(&corpus));
    Ok(())
}

pub fn sanitize(input: &Path, output: &Path, keywords: Option<&Path>, platforms: [bool; 3]) -> Result<()> {
    let corpus = load_corpus(input)?;
    let keywords = match keywords {
        Some(p) => KeywordList::load(p)?,
        None => default_keyword_list(),
    };
    let mut removed = PerPlatform::<usize>::default();
    let out = corpus.map_captions(|item| {
        if !platforms[item.platform.index()] {
            return Ok(item.caption.clone());
        }
        let (caption, report) = sanitize_directional(&item.caption, &keywords);
        removed[item.platform] += report.removed_sentence_count;
        Ok(caption)
    })?;
    save_corpus(&out, output)?;
    let total: usize = removed.iter().map(|(_, n)| n).sum();
    println!("removed sentences: {} total={total}", platform_summary(&removed));
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    One,
    Mine,
    Two,
    All,
}

/// The configured corpus after preprocessing, split into `(train, val)`.
fn prepared_split(config: &PipelineConfig) -> Result<(Corpus, Corpus)> {
    let corpus = config.load_corpus()?;
    let (prepared, removed) = config.experiment.preprocess.apply(&corpus)?;
    log::info!("corpus: {}", corpus_summary(&prepared));
    log::info!("sanitized sentences removed: {}", platform_summary(&removed));
    split(&prepared, &config.experiment)
}

pub fn train(config: &PipelineConfig, stage: Stage) -> Result<()> {
    let dir = &config.output_dir;
    fs::create_dir_all(dir).map_err(|e| PemoeError::io(dir, e))?;
    let (train, _) = prepared_split(config)?;
    let exp = &config.experiment;
    let write_log = |name: &str, log: &TrainLog| write_file(&dir.join(name), log.render());
    match stage {
        Stage::All => {
            let t = train_all(&train, exp)?;
            save_checkpoint(&t.stage1, dir.join(STAGE1_CHECKPOINT))?;
            write_log(STAGE1_LOG, &t.stage1_log)?;
            save_triplets(&t.triplets, dir.join(TRIPLETS))?;
            save_checkpoint(&t.model, dir.join(CHECKPOINT))?;
            write_log(STAGE2_LOG, &t.stage2_log)?;
        }
        Stage::One => {
            let mut model = init_model(&train, exp)?;
            let log = run_stage1(&mut model, &train, exp)?;
            save_checkpoint(&model, dir.join(STAGE1_CHECKPOINT))?;
            write_log(STAGE1_LOG, &log)?;
        }
        Stage::Mine => {
            let model = load_checkpoint(dir.join(STAGE1_CHECKPOINT))?;
            let triplets = run_mining(&model, &train, exp)?;
            save_triplets(&triplets, dir.join(TRIPLETS))?;
        }
        Stage::Two => {
            let model = load_checkpoint(dir.join(STAGE1_CHECKPOINT))?;
            let triplets = load_triplets(dir.join(TRIPLETS))?;
            let (model, log) = run_stage2(&model, &train, &triplets, exp)?;
            save_checkpoint(&model, dir.join(CHECKPOINT))?;
            write_log(STAGE2_LOG, &log)?;
        }
    }
    let name = match stage {
        Stage::One => "1",
        Stage::Mine => "mine",
        Stage::Two => "2",
        Stage::All => "all",
    };
    println!("stage {name} done; artifacts in {}", dir.display());
    Ok(())
}

pub enum EvalTarget<'a> {
    /// Every query of a corpus file.
    Corpus(&'a Path),
    /// Validation split of a pipeline config.
    Validation(&'a PipelineConfig),
}

pub struct EvalOptions {
    pub ks: Vec<usize>,
    pub fusion: Fusion,
    pub json: bool,
    pub report: Option<PathBuf>,
}

pub fn eval(checkpoint: &Path, target: EvalTarget, opts: &EvalOptions) -> Result<()> {
    let model = load_checkpoint(checkpoint)?;
    let corpus = match target {
        EvalTarget::Corpus(p) => load_corpus(p)?,
        EvalTarget::Validation(c) => prepared_split(c)?.1,
    };
    for &k in &opts.ks {
        if k == 0 {
            return Err(PemoeError::invalid("--ks", "cutoffs must be positive"));
        }
    }
    let label = checkpoint.file_name().map_or_else(|| "model".into(), |n| n.to_string_lossy().into_owned());
    let report = evaluate(&model, opts.fusion, &corpus, &opts.ks, &label)?;
    let reports = [report];
    let text = if opts.json {
        reports_to_json(&reports)
    } else {
        render_table(&reports)
    };
    print!("{text}");
    if let Some(path) = &opts.report {
        let body = if opts.json { text } else { reports[0].metric_lines() };
        write_file(path, body)?;
    }
    Ok(())
}

pub fn ablate(config: &PipelineConfig, json: bool) -> Result<Vec<EvalReport>> {
    let corpus = config.load_corpus()?;
    let runs = run_ablation_detailed(&corpus, &config.experiment)?;
    let reports: Vec<EvalReport> = runs.into_iter().map(|r| r.report).collect();
    if json {
        print!("{}", reports_to_json(&reports));
    } else {
        print!("{}", render_table(&reports));
    }
    Ok(reports)
}

pub struct GradCheckOptions {
    pub loss: LossKind,
    pub eps: f64,
    pub threshold: f64,
    pub samples: usize,
    pub batch: usize,
    pub seed: u64,
}

/// Returns whether the maximum relative error is below the threshold.
pub fn gradcheck(opts: &GradCheckOptions) -> Result<bool> {
    if !(opts.eps > 0.0 && opts.eps.is_finite()) {
        return Err(PemoeError::invalid("--eps", format!("{} must be positive", opts.eps)));
    }
    if !(opts.threshold > 0.0) {
        return Err(PemoeError::invalid("--threshold", format!("{} must be positive", opts.threshold)));
    }
    let instance = GradCheckInstance::generate(opts.loss, opts.batch, opts.seed)?;
    let report = instance.check(&GradCheckConfig {
        eps: opts.eps,
        samples: opts.samples,
        seed: opts.seed,
    })?;
    println!(
        "checked={} skipped={} max_relative_error={:.3e}",
        report.checked, report.skipped, report.max_relative_error
    );
    let ok = report.max_relative_error < opts.threshold;
    if !ok {
        eprintln!("relative error above threshold {:e}; worst per tensor:", opts.threshold);
        for w in &report.worst_per_tensor {
            eprintln!(
                "  {} [{}] analytic={:.6e} numeric={:.6e} rel={:.3e}",
                w.tensor, w.index, w.analytic, w.numeric, w.relative_error
            );
        }
    }
    Ok(ok)
}

