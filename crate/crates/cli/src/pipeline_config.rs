//! Pipeline configuration files.
//!
//! Flat `key = value` pairs. Relative paths are resolved against the
//! directory holding the config file.
//!
//! | key | default |
//! |---|---|
//! | `seed` | required |
//! | `output_dir` | required |
//! | `corpus` | corpus file; excludes every `synthetic.*` key |
//! | `synthetic.locations_per_platform`, `synthetic.queries_per_location`, `synthetic.d_t`, `synthetic.d_v`, `synthetic.noise_sigma`, `synthetic.platform_offset`, `synthetic.map_spread`, `synthetic.seed` | generator defaults |
//! | `model.d_e`, `model.h_g`, `model.h_e` | 32, 32, 16 |
//! | training keys of [`TrainConfig::KEYS`] except `seed` | training defaults |
//! | `val_fraction` | 0.2 |
//! | `variant` | `gated` |
//! | `mining_scope` | `full` |
//! | `sanitize.platforms` | `sat,drone,ground` (or `none`) |
//! | `sanitize.keywords` | built-in list |
//! | `refiner` | `identity` |
//! | `from_scratch` | `false` |

use std::path::{Path, PathBuf};

use pemoe::config::KeyValues;
use pemoe::corpus::{generate_synthetic, load_corpus, SyntheticSpec};
use pemoe::pipeline::{ExperimentConfig, HeadDims, Preprocess};
use pemoe::textprep::KeywordList;
use pemoe::{Corpus, PemoeError, Platform, Result, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub enum CorpusSource {
    File(PathBuf),
    Synthetic(SyntheticSpec),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub source: CorpusSource,
    pub experiment: ExperimentConfig,
    pub output_dir: PathBuf,
}

const SYNTHETIC_PREFIX: &str = "synthetic.";

fn config_err(key: &str, reason: impl Into<String>) -> PemoeError {
    PemoeError::Config {
        key: key.into(),
        reason: reason.into(),
    }
}

/// Comma-separated platform names, or `none`.
pub fn parse_platforms(s: &str) -> Result<[bool; 3]> {
    let mut enabled = [false; 3];
    if s.trim() == "none" {
        return Ok(enabled);
    }
    for name in s.split(',').map(str::trim).filter(|n| !n.is_empty()) {
        enabled[name.parse::<Platform>()?.index()] = true;
    }
    Ok(enabled)
}

impl PipelineConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.is_file() {
            return Err(PemoeError::invalid(
                "--config",
                format!("file {} does not exist", path.display()),
            ));
        }
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_kv(KeyValues::load(path)?, base)
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        Self::from_kv(KeyValues::parse(text)?, base)
    }

    fn from_kv(mut kv: KeyValues, base: &Path) -> Result<Self> {
        let resolve = |p: String| -> PathBuf {
            let p = PathBuf::from(p);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        };
        if !kv.contains("seed") {
            return Err(config_err("seed", "missing required key"));
        }
        let output_dir = resolve(kv.require::<String>("output_dir")?);

        let synthetic_keys = [
            "locations_per_platform",
            "queries_per_location",
            "d_t",
            "d_v",
            "noise_sigma",
            "platform_offset",
            "map_spread",
            "seed",
        ];
        let has_synthetic = synthetic_keys
            .iter()
            .any(|k| kv.contains(&format!("{SYNTHETIC_PREFIX}{k}")));
        let source = match (kv.take::<String>("corpus")?, has_synthetic) {
            (Some(_), true) => {
                return Err(config_err("corpus", "set either `corpus` or `synthetic.*` keys, not both"));
            }
            (None, false) => {
                return Err(config_err("corpus", "missing: set `corpus` or `synthetic.*` keys"));
            }
            (Some(p), false) => {
                let p = resolve(p);
                if !p.is_file() {
                    return Err(config_err("corpus", format!("file {} does not exist", p.display())));
                }
                CorpusSource::File(p)
            }
            (None, true) => {
                let d = SyntheticSpec::default();
                let key = |k: &str| format!("{SYNTHETIC_PREFIX}{k}");
                let spec = SyntheticSpec {
                    locations_per_platform: kv.take_or(&key("locations_per_platform"), d.locations_per_platform)?,
                    queries_per_location: kv.take_or(&key("queries_per_location"), d.queries_per_location)?,
                    d_t: kv.take_or(&key("d_t"), d.d_t)?,
                    d_v: kv.take_or(&key("d_v"), d.d_v)?,
                    noise_sigma: kv.take_or(&key("noise_sigma"), d.noise_sigma)?,
                    platform_offset: kv.take_or(&key("platform_offset"), d.platform_offset)?,
                    map_spread: kv.take_or(&key("map_spread"), d.map_spread)?,
                    seed: kv.take_or(&key("seed"), d.seed)?,
                };
                spec.validate()?;
                CorpusSource::Synthetic(spec)
            }
        };

        let dh = HeadDims::default();
        let heads = HeadDims {
            d_e: kv.take_or("model.d_e", dh.d_e)?,
            h_g: kv.take_or("model.h_g", dh.h_g)?,
            h_e: kv.take_or("model.h_e", dh.h_e)?,
        };
        for (key, v) in [("model.d_e", heads.d_e), ("model.h_g", heads.h_g), ("model.h_e", heads.h_e)] {
            if v == 0 {
                return Err(config_err(key, "must be a positive integer"));
            }
        }
        let train = TrainConfig::from_kv(&mut kv)?;

        let de = ExperimentConfig::default();
        let val_fraction: f64 = kv.take_or("val_fraction", de.val_fraction)?;
        if !(val_fraction > 0.0 && val_fraction < 1.0) {
            return Err(config_err("val_fraction", "must lie strictly between 0 and 1"));
        }
        let variant = kv.take_or("variant", de.variant)?;
        let mining_scope = kv.take_or("mining_scope", de.mining_scope)?;
        let from_scratch = kv.take_or("from_scratch", de.from_scratch)?;

        let mut preprocess = Preprocess::default();
        if let Some(p) = kv.take::<String>("sanitize.platforms")? {
            preprocess.sanitize = parse_platforms(&p).map_err(|e| config_err("sanitize.platforms", e.to_string()))?;
        }
        if let Some(p) = kv.take::<String>("sanitize.keywords")? {
            let p = resolve(p);
            if !p.is_file() {
                return Err(config_err("sanitize.keywords", format!("file {} does not exist", p.display())));
            }
            preprocess.keywords = KeywordList::load(&p)?;
        }
        if let Some(r) = kv.take::<String>("refiner")? {
            preprocess.refiner = r.parse().map_err(|e: PemoeError| config_err("refiner", e.to_string()))?;
        }
        kv.finish()?;

        Ok(PipelineConfig {
            source,
            experiment: ExperimentConfig {
                heads,
                train,
                val_fraction,
                preprocess,
                from_scratch,
                mining_scope,
                variant,
            },
            output_dir,
        })
    }

    pub fn load_corpus(&self) -> Result<Corpus> {
        match &self.source {
            CorpusSource::File(p) => load_corpus(p),
            CorpusSource::Synthetic(spec) => generate_synthetic(spec),
        }
    }
}
