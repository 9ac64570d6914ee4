use crate::error::{PemoeError, Result};
use crate::model::{ParamGroup, PeMoeModel};

use super::GradientSet;

/// Decoupled-weight-decay Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates of one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Moments {
    pub fn zeros(len: usize) -> Self {
        Moments {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// One update of a single tensor; `t` is the 1-based step count.
///
/// `theta <- theta - lr * wd * theta`, then the bias-corrected Adam step
/// `theta <- theta - lr * m_hat / (sqrt(v_hat) + eps)`.
pub fn adamw_step(params: &mut [f64], grads: &[f64], moments: &mut Moments, t: u64, hp: &AdamW) -> Result<()> {
    if params.len() != grads.len() || moments.m.len() != params.len() || moments.v.len() != params.len() {
        return Err(PemoeError::dims("optimizer state", params.len(), grads.len()));
    }
    if t == 0 {
        return Err(PemoeError::invalid("step", "step count is 1-based"));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(PemoeError::NonFinite {
            context: "gradient passed to the optimizer".into(),
        });
    }
    let c1 = 1.0 - hp.beta1.powi(t as i32);
    let c2 = 1.0 - hp.beta2.powi(t as i32);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(moments.m.iter_mut())
        .zip(moments.v.iter_mut())
    {
        *p -= hp.lr * hp.weight_decay * *p;
        *m = hp.beta1 * *m + (1.0 - hp.beta1) * g;
        *v = hp.beta2 * *v + (1.0 - hp.beta2) * g * g;
        *p -= hp.lr * (*m / c1) / ((*v / c2).sqrt() + hp.eps);
    }
    Ok(())
}

/// Which parameter groups an optimizer updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Trainable {
    pub gate: bool,
    pub experts: [bool; 3],
}

impl Trainable {
    pub fn all() -> Self {
        Trainable {
            gate: true,
            experts: [true; 3],
        }
    }

    pub fn gate_only() -> Self {
        Trainable {
            gate: true,
            experts: [false; 3],
        }
    }

    pub fn experts(experts: [bool; 3]) -> Self {
        Trainable { gate: false, experts }
    }

    pub fn includes(&self, group: ParamGroup) -> bool {
        match group {
            ParamGroup::Gate => self.gate,
            ParamGroup::Expert(p) => self.experts[p.index()],
        }
    }
}

/// AdamW over a whole model, restricted to the trainable groups.
#[derive(Debug, Clone)]
pub struct Optimizer {
    hp: AdamW,
    mask: Trainable,
    step: u64,
    moments: Vec<Moments>,
}

impl Optimizer {
    pub fn new(model: &PeMoeModel, hp: AdamW, mask: Trainable) -> Self {
        Optimizer {
            hp,
            mask,
            step: 0,
            moments: model.tensors().iter().map(|(_, t)| Moments::zeros(t.len())).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, model: &mut PeMoeModel, grads: &GradientSet) -> Result<()> {
        self.step += 1;
        let ids: Vec<_> = model.tensors().iter().map(|(id, _)| *id).collect();
        let grad_tensors = grads.tensors();
        if grad_tensors.len() != ids.len() {
            return Err(PemoeError::dims("gradient tensors", ids.len(), grad_tensors.len()));
        }
        for (((id, param), (_, g)), mom) in ids
            .iter()
            .zip(model.tensors_mut())
            .zip(grad_tensors)
            .zip(self.moments.iter_mut())
        {
            if self.mask.includes(id.group) {
                adamw_step(param, g, mom, self.step, &self.hp)?;
            }
        }
        Ok(())
    }
}
