//! Central finite-difference validation of [`compute_gradients`].

use crate::error::{PemoeError, Result};
use crate::model::{Fusion, ModelDims, PeMoeModel, TensorId};
use crate::rng::{derive_seed, SplitMix64};
use rand::seq::SliceRandom;

use super::backward::{batch_loss, compute_gradients, kink_arguments, Batch, LossKind, Objective};

/// Pre-activations closer to zero than this count as sitting on a kink.
pub const KINK_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub eps: f64,
    /// Parameters to check; `0` checks all of them.
    pub samples: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            eps: 1e-4,
            samples: 256,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub tensor: TensorId,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub checked: usize,
    /// Sampled parameters skipped because a `±eps` step crossed a kink.
    pub skipped: usize,
    /// Worst parameter of each tensor that had at least one check, in tensor order.
    pub worst_per_tensor: Vec<ParamCheck>,
}

/// `|a - b| / max(1e-8, |a| + |b|)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
}

/// Compares analytic gradients with `(L(theta + eps) - L(theta - eps)) / (2 eps)`.
///
/// Parameters are visited in an order shuffled by `config.seed` until
/// `config.samples` have been checked. A parameter whose `±eps` step moves
/// any kink argument (see [`kink_arguments`]) across zero is skipped, since
/// the difference quotient then straddles two linear pieces.
pub fn finite_diff_check(
    model: &PeMoeModel,
    batch: &Batch,
    objective: &Objective,
    config: &GradCheckConfig,
) -> Result<GradCheckReport> {
    if !(config.eps > 0.0 && config.eps.is_finite()) {
        return Err(PemoeError::invalid("eps", format!("{} must be positive", config.eps)));
    }
    let (_, grads) = compute_gradients(model, batch, objective)?;
    let grad_tensors = grads.tensors();
    let ids: Vec<TensorId> = grad_tensors.iter().map(|(id, _)| *id).collect();
    let mut coords: Vec<(usize, usize)> = grad_tensors
        .iter()
        .enumerate()
        .flat_map(|(ti, (_, t))| (0..t.len()).map(move |i| (ti, i)))
        .collect();
    coords.shuffle(&mut SplitMix64::new(config.seed));
    let target = if config.samples == 0 {
        coords.len()
    } else {
        config.samples
    };

    let base_signs = signs(&kink_arguments(model, batch, objective)?);
    let mut work = model.clone();
    let mut worst: Vec<Option<ParamCheck>> = vec![None; ids.len()];
    let (mut checked, mut skipped) = (0, 0);
    for (ti, i) in coords {
        if checked == target {
            break;
        }
        let original = work.tensors()[ti].1[i];
        let mut eval = |delta: f64| -> Result<(f64, bool)> {
            work.tensors_mut()[ti][i] = original + delta;
            let same = signs(&kink_arguments(&work, batch, objective)?) == base_signs;
            let loss = batch_loss(&work, batch, objective)?;
            Ok((loss, same))
        };
        let (plus, same_plus) = eval(config.eps)?;
        let (minus, same_minus) = eval(-config.eps)?;
        work.tensors_mut()[ti][i] = original;
        if !(same_plus && same_minus) {
            skipped += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * config.eps);
        let analytic = grad_tensors[ti].1[i];
        let check = ParamCheck {
            tensor: ids[ti],
            index: i,
            analytic,
            numeric,
            relative_error: relative_error(analytic, numeric),
        };
        checked += 1;
        if worst[ti]
            .as_ref()
            .map_or(true, |w| check.relative_error > w.relative_error)
        {
            worst[ti] = Some(check);
        }
    }
    let worst_per_tensor: Vec<ParamCheck> = worst.into_iter().flatten().collect();
    Ok(GradCheckReport {
        max_relative_error: worst_per_tensor
            .iter()
            .map(|c| c.relative_error)
            .fold(0.0, f64::max),
        checked,
        skipped,
        worst_per_tensor,
    })
}

/// Which side of its kink each argument lies on.
fn signs(args: &[f64]) -> Vec<bool> {
    args.iter().map(|&z| z > 0.0).collect()
}

/// Seeded random model and batch for gradient checking.
#[derive(Debug, Clone)]
pub struct GradCheckInstance {
    pub model: PeMoeModel,
    pub objective: Objective,
    pub texts: Vec<Vec<f64>>,
    pub positives: Vec<Vec<f64>>,
    pub negatives: Vec<Vec<f64>>,
}

impl GradCheckInstance {
    pub fn dims() -> ModelDims {
        ModelDims {
            d_t: 6,
            d_v: 5,
            d_e: 4,
            h_g: 5,
            h_e: 6,
        }
    }

    /// Draws parameters (biases included, so no pre-activation is zero by
    /// construction) and Gaussian inputs. A draw with any kink argument
    /// within [`KINK_TOLERANCE`] of zero is discarded and redrawn.
    pub fn generate(loss: LossKind, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(PemoeError::invalid("batch_size", "must be positive"));
        }
        let dims = Self::dims();
        for attempt in 0u64.. {
            let s = derive_seed(seed, &format!("gradcheck.{attempt}"));
            let mut model = PeMoeModel::init(dims, s)?;
            model.temperature = 0.1;
            let mut rng = SplitMix64::new(derive_seed(s, "inputs"));
            let ids: Vec<TensorId> = model.tensors().iter().map(|(id, _)| *id).collect();
            for (id, t) in ids.iter().zip(model.tensors_mut()) {
                if id.name.ends_with("bias") {
                    t.iter_mut().for_each(|b| *b = 0.1 * rng.gaussian());
                }
            }
            let mut draw = |n: usize, d: usize| -> Vec<Vec<f64>> {
                (0..n).map(|_| (0..d).map(|_| rng.gaussian()).collect()).collect()
            };
            let texts = draw(batch_size, dims.d_t);
            let positives = draw(batch_size, dims.d_v);
            let negatives = match loss {
                LossKind::InfoNce => Vec::new(),
                LossKind::Triplet { .. } => draw(batch_size, dims.d_v),
            };
            let instance = GradCheckInstance {
                model,
                objective: Objective {
                    fusion: Fusion::Gated,
                    loss,
                },
                texts,
                positives,
                negatives,
            };
            let args = kink_arguments(&instance.model, &instance.batch(), &instance.objective)?;
            if args.iter().all(|z| z.abs() >= KINK_TOLERANCE) {
                return Ok(instance);
            }
        }
        unreachable!("attempt counter is unbounded")
    }

    pub fn batch(&self) -> Batch<'_> {
        fn r(v: &[Vec<f64>]) -> Vec<&[f64]> {
            v.iter().map(Vec::as_slice).collect()
        }
        match self.objective.loss {
            LossKind::InfoNce => Batch::Pairs {
                texts: r(&self.texts),
                images: r(&self.positives),
            },
            LossKind::Triplet { .. } => Batch::Triplets {
                texts: r(&self.texts),
                positives: r(&self.positives),
                negatives: r(&self.negatives),
            },
        }
    }

    pub fn check(&self, config: &GradCheckConfig) -> Result<GradCheckReport> {
        finite_diff_check(&self.model, &self.batch(), &self.objective, config)
    }
}
