use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use pemoe::corpus::{SyntheticSpec, MAP_SPREAD, PLATFORM_OFFSET};
use pemoe::train::LossKind;
use pemoe::{Fusion, PemoeError, Result};
use pemoe_cli::commands::{self, EvalOptions, EvalTarget, GradCheckOptions, Stage};
use pemoe_cli::pipeline_config::{parse_platforms, PipelineConfig};

const EXIT_VALIDATION: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

/// Platform-expert retrieval: synthetic corpora, caption sanitization,
/// two-stage training, evaluation and the ablation ladder.
///
/// Pipeline commands read a `key = value` config file given by `--config`
/// or the PEMOE_CONFIG environment variable. Exit status: 0 success,
/// 1 invalid input, 2 runtime or numeric failure.
#[derive(Parser)]
#[command(name = "pemoe", version)]
struct Cli {
    /// Worker threads for scoring, mining and evaluation (default: all cores).
    /// Results do not depend on this value.
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus manifest.
    Gen {
        #[arg(long, default_value_t = 30)]
        locations: usize,
        #[arg(long, default_value_t = 4)]
        queries_per_location: usize,
        #[arg(long, default_value_t = 16)]
        d_t: usize,
        #[arg(long, default_value_t = 16)]
        d_v: usize,
        #[arg(long, default_value_t = 0.5)]
        sigma: f64,
        #[arg(long, default_value_t = PLATFORM_OFFSET)]
        offset: f64,
        #[arg(long, default_value_t = MAP_SPREAD)]
        spread: f64,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Remove directional sentences from gallery captions.
    Sanitize {
        #[arg(long, short)]
        input: PathBuf,
        #[arg(long, short)]
        output: PathBuf,
        /// Keyword file, one phrase per line (default: built-in list).
        #[arg(long)]
        keywords: Option<PathBuf>,
        /// Comma-separated platforms to sanitize: sat, drone, ground.
        #[arg(long, default_value = "sat,drone,ground")]
        platforms: String,
    },
    /// Run Stage 1, hard-negative mining and Stage 2.
    Train {
        #[arg(long, env = "PEMOE_CONFIG")]
        config: PathBuf,
        #[arg(long, value_enum, default_value_t = StageArg::All)]
        stage: StageArg,
        /// Start Stage 2 from a fresh initialization.
        #[arg(long)]
        from_scratch: bool,
    },
    /// Rank a gallery and report Recall@K.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Evaluate every query of this corpus file.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Without --corpus, evaluate the validation split of this config.
        #[arg(long, env = "PEMOE_CONFIG")]
        config: Option<PathBuf>,
        /// Extra cutoffs; R@1, R@5 and R@10 are always reported.
        #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
        ks: Vec<usize>,
        /// gated, static, static:a,b,c or single:<platform>.
        #[arg(long, default_value = "gated")]
        fusion: String,
        #[arg(long)]
        json: bool,
        /// Also write the report to this file.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Train and evaluate the four ablation configurations.
    Ablate {
        #[arg(long, env = "PEMOE_CONFIG")]
        config: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Compare analytic gradients with central differences.
    Gradcheck {
        #[arg(long, value_enum, default_value_t = LossArg::Infonce)]
        loss: LossArg,
        #[arg(long, default_value_t = 1e-4)]
        eps: f64,
        #[arg(long, default_value_t = 1e-4)]
        threshold: f64,
        /// Parameters to check; 0 checks all.
        #[arg(long, default_value_t = 256)]
        samples: usize,
        #[arg(long, default_value_t = 4)]
        batch: usize,
        #[arg(long, default_value_t = 0.2)]
        margin: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    #[value(name = "1")]
    One,
    Mine,
    #[value(name = "2")]
    Two,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum LossArg {
    Infonce,
    Triplet,
}

fn flag_error(flag: &str, reason: &str) -> PemoeError {
    PemoeError::invalid(flag, reason)
}

fn run(cli: Cli) -> Result<ExitCode> {
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(flag_error("--workers", "must be positive"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| flag_error("--workers", &e.to_string()))?;
    }
    match cli.command {
        Command::Gen {
            locations,
            queries_per_location,
            d_t,
            d_v,
            sigma,
            offset,
            spread,
            seed,
            out,
        } => {
            for (flag, v) in [
                ("--locations", locations),
                ("--queries-per-location", queries_per_location),
                ("--d-t", d_t),
                ("--d-v", d_v),
            ] {
                if v == 0 {
                    return Err(flag_error(flag, "must be positive"));
                }
            }
            let spec = SyntheticSpec {
                locations_per_platform: locations,
                queries_per_location,
                d_t,
                d_v,
                noise_sigma: sigma,
                platform_offset: offset,
                map_spread: spread,
                seed,
            };
            spec.validate().map_err(|e| match e {
                PemoeError::InvalidArgument { name, reason } => {
                    let flag = match name.as_str() {
                        "noise_sigma" => "--sigma",
                        "platform_offset" => "--offset",
                        "map_spread" => "--spread",
                        _ => "--seed",
                    };
                    flag_error(flag, &reason)
                }
                other => other,
            })?;
            commands::gen(&spec, &out)?;
        }
        Command::Sanitize {
            input,
            output,
            keywords,
            platforms,
        } => {
            let platforms = parse_platforms(&platforms).map_err(|e| flag_error("--platforms", &e.to_string()))?;
            commands::sanitize(&input, &output, keywords.as_deref(), platforms)?;
        }
        Command::Train {
            config,
            stage,
            from_scratch,
        } => {
            let mut config = PipelineConfig::load(&config)?;
            config.experiment.from_scratch |= from_scratch;
            let stage = match stage {
                StageArg::One => Stage::One,
                StageArg::Mine => Stage::Mine,
                StageArg::Two => Stage::Two,
                StageArg::All => Stage::All,
            };
            commands::train(&config, stage)?;
        }
        Command::Eval {
            checkpoint,
            corpus,
            config,
            ks,
            fusion,
            json,
            report,
        } => {
            let fusion: Fusion = fusion.parse()?;
            let opts = EvalOptions {
                ks,
                fusion,
                json,
                report,
            };
            match (corpus, config) {
                (Some(c), _) => commands::eval(&checkpoint, EvalTarget::Corpus(&c), &opts)?,
                (None, Some(c)) => {
                    let config = PipelineConfig::load(&c)?;
                    commands::eval(&checkpoint, EvalTarget::Validation(&config), &opts)?
                }
                (None, None) => return Err(flag_error("--corpus", "give --corpus or --config")),
            }
        }
        Command::Ablate { config, json } => {
            let config = PipelineConfig::load(&config)?;
            commands::ablate(&config, json)?;
        }
        Command::Gradcheck {
            loss,
            eps,
            threshold,
            samples,
            batch,
            margin,
            seed,
        } => {
            let loss = match loss {
                LossArg::Infonce => LossKind::InfoNce,
                LossArg::Triplet => {
                    if !(margin > 0.0) {
                        return Err(flag_error("--margin", "must be positive"));
                    }
                    LossKind::Triplet { margin }
                }
            };
            let ok = commands::gradcheck(&GradCheckOptions {
                loss,
                eps,
                threshold,
                samples,
                batch,
                seed,
            })?;
            if !ok {
                return Ok(ExitCode::from(EXIT_RUNTIME));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { EXIT_VALIDATION } else { EXIT_RUNTIME })
        }
    }
}
