//! Reverse-mode gradients of the batch losses.
//!
//! Forward per text `x`: gate `z1 = W1 x + b1`, `h = relu(z1)`,
//! `g = softmax(W2 h + b2)`; expert `a = relu(A1 x + c1)`, `u = A2 a + c2`,
//! `t = u / |u|`. Per image `y`: `p = P y + d`, `v = p / |p|`. Expert score
//! `S_k = t_k . v_k`, fused `F = sum_k w_k S_k` over the active experts.
//!
//! Backward through the normalization uses `dL/du = (dL/dt - t (t . dL/dt)) / |u|`,
//! and through the softmax `dL/dz = g * (dL/dg - g . dL/dg)`.
//! Reduction order is fixed (texts, then images, ascending), so gradients
//! are bit-reproducible.

use crate::corpus::{PerPlatform, Platform};
use crate::error::{PemoeError, Result};
use crate::model::{dot, relu, ExpertHead, Fusion, GateNetwork, Linear, PeMoeModel, TensorId};

use super::loss::{info_nce_with_grad, triplet_loss};

/// Training batch over raw embeddings.
#[derive(Debug, Clone)]
pub enum Batch<'a> {
    /// In-batch contrastive pairs: `texts[i]` matches `images[i]`.
    Pairs {
        texts: Vec<&'a [f64]>,
        images: Vec<&'a [f64]>,
    },
    /// `(texts[i], positives[i], negatives[i])` triplets.
    Triplets {
        texts: Vec<&'a [f64]>,
        positives: Vec<&'a [f64]>,
        negatives: Vec<&'a [f64]>,
    },
}

impl Batch<'_> {
    pub fn len(&self) -> usize {
        match self {
            Batch::Pairs { texts, .. } | Batch::Triplets { texts, .. } => texts.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn texts_and_images(&self) -> Result<(&[&[f64]], Vec<&[f64]>)> {
        match self {
            Batch::Pairs { texts, images } => {
                if texts.len() != images.len() {
                    return Err(PemoeError::dims("contrastive batch images", texts.len(), images.len()));
                }
                Ok((texts, images.clone()))
            }
            Batch::Triplets {
                texts,
                positives,
                negatives,
            } => {
                if positives.len() != texts.len() {
                    return Err(PemoeError::dims("triplet batch positives", texts.len(), positives.len()));
                }
                if negatives.len() != texts.len() {
                    return Err(PemoeError::dims("triplet batch negatives", texts.len(), negatives.len()));
                }
                Ok((texts, positives.iter().chain(negatives).copied().collect()))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossKind {
    InfoNce,
    Triplet { margin: f64 },
}

/// Which loss, over which fused score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub fusion: Fusion,
    pub loss: LossKind,
}

/// One gradient tensor per model tensor, same shapes and order.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub gate: GateNetwork,
    pub experts: PerPlatform<ExpertHead>,
}

impl GradientSet {
    pub fn zeros_like(model: &PeMoeModel) -> Self {
        let zero = |l: &Linear| Linear::zeros(l.in_dim(), l.out_dim());
        GradientSet {
            gate: GateNetwork {
                layer1: zero(&model.gate.layer1),
                layer2: zero(&model.gate.layer2),
            },
            experts: PerPlatform::from_fn(|p| {
                let e = &model.experts[p];
                ExpertHead {
                    platform: p,
                    adapter1: zero(&e.adapter1),
                    adapter2: zero(&e.adapter2),
                    projection: zero(&e.projection),
                }
            }),
        }
    }

    pub fn tensors(&self) -> Vec<(TensorId, &[f64])> {
        crate::model::tensor_list(&self.gate, &self.experts)
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|x| x.is_finite()))
    }
}

struct GateTrace {
    z: Vec<f64>,
    hidden: Vec<f64>,
    weights: [f64; 3],
}

struct TextTrace {
    z: Vec<f64>,
    hidden: Vec<f64>,
    norm: f64,
    unit: Vec<f64>,
}

struct ImageTrace {
    norm: f64,
    unit: Vec<f64>,
}

/// Every intermediate of a batch forward pass.
struct Trace {
    n: usize,
    m: usize,
    active: [bool; 3],
    gate: Vec<Option<GateTrace>>,
    weights: Vec<[f64; 3]>,
    text: Vec<PerPlatform<Option<TextTrace>>>,
    image: Vec<PerPlatform<Option<ImageTrace>>>,
    /// Row-major `n x m` per expert.
    expert_scores: PerPlatform<Vec<f64>>,
    fused: Vec<f64>,
}

impl Trace {
    fn relu_preactivations(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for g in self.gate.iter().flatten() {
            out.extend_from_slice(&g.z);
        }
        for t in &self.text {
            for (_, tt) in t.iter() {
                if let Some(tt) = tt {
                    out.extend_from_slice(&tt.z);
                }
            }
        }
        out
    }
}

fn unit(x: Vec<f64>, context: &str) -> Result<(f64, Vec<f64>)> {
    let norm = dot(&x, &x).sqrt();
    if !norm.is_finite() {
        return Err(PemoeError::NonFinite { context: context.into() });
    }
    if norm < f64::MIN_POSITIVE {
        return Err(PemoeError::DegenerateEmbedding { context: context.into() });
    }
    Ok((norm, x.iter().map(|v| v / norm).collect()))
}

fn check(context: &str, expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(PemoeError::dims(context, expected, found));
    }
    Ok(())
}

fn forward(model: &PeMoeModel, texts: &[&[f64]], images: &[&[f64]], fusion: Fusion) -> Result<Trace> {
    let dims = model.dims();
    let active = fusion.active();
    let (n, m) = (texts.len(), images.len());
    let mut gate = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    let mut text = Vec::with_capacity(n);
    for t in texts {
        check("batch text embedding", dims.d_t, t.len())?;
        let g = if fusion.uses_gate() {
            let z = model.gate.layer1.forward(t);
            let hidden = relu(z.clone());
            let l = model.gate.layer2.forward(&hidden);
            let w = crate::model::softmax3([l[0], l[1], l[2]]);
            Some(GateTrace { z, hidden, weights: w })
        } else {
            None
        };
        weights.push(match &g {
            Some(g) => g.weights,
            None => model.fusion_weights(fusion, t)?,
        });
        gate.push(g);
        let mut per = PerPlatform::<Option<TextTrace>>::default();
        for p in Platform::ALL.into_iter().filter(|p| active[p.index()]) {
            let e = &model.experts[p];
            let z = e.adapter1.forward(t);
            let hidden = relu(z.clone());
            let (norm, unit_t) = unit(e.adapter2.forward(&hidden), "text adapter output")?;
            per[p] = Some(TextTrace {
                z,
                hidden,
                norm,
                unit: unit_t,
            });
        }
        text.push(per);
    }
    let mut image = Vec::with_capacity(m);
    for v in images {
        check("batch image embedding", dims.d_v, v.len())?;
        let mut per = PerPlatform::<Option<ImageTrace>>::default();
        for p in Platform::ALL.into_iter().filter(|p| active[p.index()]) {
            let (norm, unit_v) = unit(model.experts[p].projection.forward(v), "visual projection output")?;
            per[p] = Some(ImageTrace { norm, unit: unit_v });
        }
        image.push(per);
    }
    let mut expert_scores = PerPlatform::from_fn(|_| vec![0.0; n * m]);
    let mut fused = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            let mut f = 0.0;
            for p in Platform::ALL.into_iter().filter(|p| active[p.index()]) {
                let s = dot(
                    &text[i][p].as_ref().expect("active").unit,
                    &image[j][p].as_ref().expect("active").unit,
                );
                expert_scores[p][i * m + j] = s;
                f += weights[i][p.index()] * s;
            }
            fused[i * m + j] = f;
        }
    }
    Ok(Trace {
        n,
        m,
        active,
        gate,
        weights,
        text,
        image,
        expert_scores,
        fused,
    })
}

/// Loss over the fused matrix and `dL/dF`.
fn loss_and_grad(trace: &Trace, loss: LossKind, tau: f64) -> Result<(f64, Vec<f64>)> {
    let (n, m) = (trace.n, trace.m);
    match loss {
        LossKind::InfoNce => {
            if n != m {
                return Err(PemoeError::invalid("loss", "InfoNCE needs a pair batch"));
            }
            info_nce_with_grad(&trace.fused, n, tau)
        }
        LossKind::Triplet { margin } => {
            if !(margin > 0.0) {
                return Err(PemoeError::invalid("triplet_margin", format!("{margin} must be positive")));
            }
            if m != 2 * n {
                return Err(PemoeError::invalid("loss", "triplet loss needs a triplet batch"));
            }
            let mut grad = vec![0.0; n * m];
            if n == 0 {
                return Ok((0.0, grad));
            }
            let mut total = 0.0;
            for i in 0..n {
                let (pos, neg) = (i * m + i, i * m + n + i);
                let l = triplet_loss(trace.fused[pos], trace.fused[neg], margin);
                total += l;
                if l > 0.0 {
                    grad[pos] -= 1.0 / n as f64;
                    grad[neg] += 1.0 / n as f64;
                }
            }
            Ok((total / n as f64, grad))
        }
    }
}

fn validate_objective(batch: &Batch, objective: &Objective) -> Result<()> {
    match (batch, objective.loss) {
        (Batch::Pairs { .. }, LossKind::InfoNce) | (Batch::Triplets { .. }, LossKind::Triplet { .. }) => Ok(()),
        (Batch::Pairs { .. }, _) => Err(PemoeError::invalid("loss", "pair batches take the InfoNCE loss")),
        (Batch::Triplets { .. }, _) => Err(PemoeError::invalid("loss", "triplet batches take the triplet loss")),
    }
}

/// Loss only.
pub fn batch_loss(model: &PeMoeModel, batch: &Batch, objective: &Objective) -> Result<f64> {
    validate_objective(batch, objective)?;
    let (texts, images) = batch.texts_and_images()?;
    let trace = forward(model, texts, &images, objective.fusion)?;
    let (loss, _) = loss_and_grad(&trace, objective.loss, model.temperature)?;
    finite(loss)
}

/// Arguments of every non-smooth function in the loss: the ReLU
/// pre-activations (gate first, then experts) and, for the triplet loss,
/// each hinge argument `margin - F_pos + F_neg`.
pub fn kink_arguments(model: &PeMoeModel, batch: &Batch, objective: &Objective) -> Result<Vec<f64>> {
    validate_objective(batch, objective)?;
    let (texts, images) = batch.texts_and_images()?;
    let trace = forward(model, texts, &images, objective.fusion)?;
    let mut out = trace.relu_preactivations();
    if let LossKind::Triplet { margin } = objective.loss {
        let (n, m) = (trace.n, trace.m);
        out.extend((0..n).map(|i| margin - trace.fused[i * m + i] + trace.fused[i * m + n + i]));
    }
    Ok(out)
}

fn finite(loss: f64) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(PemoeError::NonFinite {
            context: "batch loss".into(),
        })
    }
}

/// Loss and exact gradients with respect to every parameter. Experts that
/// the fusion ignores, and the gate under non-gated fusion, get zeros.
pub fn compute_gradients(model: &PeMoeModel, batch: &Batch, objective: &Objective) -> Result<(f64, GradientSet)> {
    validate_objective(batch, objective)?;
    let (texts, images) = batch.texts_and_images()?;
    let trace = forward(model, texts, &images, objective.fusion)?;
    let (loss, d_fused) = loss_and_grad(&trace, objective.loss, model.temperature)?;
    let loss = finite(loss)?;
    let mut grads = GradientSet::zeros_like(model);
    let (n, m) = (trace.n, trace.m);
    let d_e = model.dims().d_e;
    let active: Vec<Platform> = Platform::ALL
        .into_iter()
        .filter(|p| trace.active[p.index()])
        .collect();

    let mut d_image: Vec<PerPlatform<Vec<f64>>> = (0..m).map(|_| PerPlatform::from_fn(|_| vec![0.0; d_e])).collect();
    for i in 0..n {
        let mut d_weights = [0.0; 3];
        for &p in &active {
            let k = p.index();
            let tt = trace.text[i][p].as_ref().expect("active");
            let mut d_t = vec![0.0; d_e];
            for j in 0..m {
                let df = d_fused[i * m + j];
                if df == 0.0 {
                    continue;
                }
                d_weights[k] += df * trace.expert_scores[p][i * m + j];
                let ds = df * trace.weights[i][k];
                let v = &trace.image[j][p].as_ref().expect("active").unit;
                for c in 0..d_e {
                    d_t[c] += ds * v[c];
                    d_image[j][p][c] += ds * tt.unit[c];
                }
            }
            let e = &model.experts[p];
            let g = &mut grads.experts[p];
            let d_u = through_normalize(&tt.unit, tt.norm, &d_t);
            let mut d_hidden = e.adapter2.backward(&tt.hidden, &d_u, &mut g.adapter2);
            relu_mask(&mut d_hidden, &tt.z);
            e.adapter1.backward(texts[i], &d_hidden, &mut g.adapter1);
        }
        if let Some(gt) = &trace.gate[i] {
            let w = gt.weights;
            let mean = w[0] * d_weights[0] + w[1] * d_weights[1] + w[2] * d_weights[2];
            let d_logits: Vec<f64> = (0..3).map(|k| w[k] * (d_weights[k] - mean)).collect();
            let mut d_hidden = model.gate.layer2.backward(&gt.hidden, &d_logits, &mut grads.gate.layer2);
            relu_mask(&mut d_hidden, &gt.z);
            model.gate.layer1.backward(texts[i], &d_hidden, &mut grads.gate.layer1);
        }
    }
    for (j, v) in images.iter().enumerate() {
        for &p in &active {
            let it = trace.image[j][p].as_ref().expect("active");
            let d_p = through_normalize(&it.unit, it.norm, &d_image[j][p]);
            model.experts[p]
                .projection
                .backward(v, &d_p, &mut grads.experts[p].projection);
        }
    }
    if !grads.is_finite() {
        return Err(PemoeError::NonFinite {
            context: "gradients".into(),
        });
    }
    Ok((loss, grads))
}

fn through_normalize(unit: &[f64], norm: f64, d_unit: &[f64]) -> Vec<f64> {
    let proj = dot(unit, d_unit);
    unit.iter().zip(d_unit).map(|(u, d)| (d - u * proj) / norm).collect()
}

fn relu_mask(d: &mut [f64], z: &[f64]) {
    for (g, &zi) in d.iter_mut().zip(z) {
        if zi <= 0.0 {
            *g = 0.0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{score_matrix_raw, ModelDims};
    use crate::rng::SplitMix64;
    use crate::train::info_nce_loss;

    fn setup(seed: u64, n: usize) -> (PeMoeModel, Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let dims = ModelDims {
            d_t: 5,
            d_v: 4,
            d_e: 3,
            h_g: 6,
            h_e: 7,
        };
        let mut model = PeMoeModel::init(dims, seed).unwrap();
        model.temperature = 0.2;
        let mut rng = SplitMix64::new(seed + 100);
        let texts = (0..n).map(|_| (0..5).map(|_| rng.gaussian()).collect()).collect();
        let images = (0..2 * n).map(|_| (0..4).map(|_| rng.gaussian()).collect()).collect();
        (model, texts, images)
    }

    fn refs(v: &[Vec<f64>]) -> Vec<&[f64]> {
        v.iter().map(Vec::as_slice).collect()
    }

    #[test]
    fn loss_matches_independent_forward() {
        let (model, texts, images) = setup(1, 4);
        let (t, im) = (refs(&texts), refs(&images[..4]));
        for fusion in [Fusion::Gated, Fusion::equal(), Fusion::Single(Platform::Ground)] {
            let batch = Batch::Pairs {
                texts: t.clone(),
                images: im.clone(),
            };
            let obj = Objective {
                fusion,
                loss: LossKind::InfoNce,
            };
            let (loss, _) = compute_gradients(&model, &batch, &obj).unwrap();
            let sm = score_matrix_raw(&model, fusion, &t, &im).unwrap();
            let oracle = info_nce_loss(&sm.values, 4, model.temperature).unwrap();
            assert!((loss - oracle).abs() < 1e-12);
            assert_eq!(loss, batch_loss(&model, &batch, &obj).unwrap());
        }
    }

    #[test]
    fn symmetric_experts_give_zero_gate_bias_sum() {
        let (mut model, texts, images) = setup(2, 3);
        let shared = model.experts[Platform::Satellite].clone();
        for (p, e) in model.experts.iter_mut() {
            *e = ExpertHead { platform: p, ..shared.clone() };
        }
        let batch = Batch::Pairs {
            texts: refs(&texts),
            images: refs(&images[..3]),
        };
        let obj = Objective {
            fusion: Fusion::Gated,
            loss: LossKind::InfoNce,
        };
        let (_, g) = compute_gradients(&model, &batch, &obj).unwrap();
        let b = &g.gate.layer2.bias;
        assert!((b[0] + b[1] + b[2]).abs() < 1e-15);
    }

    #[test]
    fn single_fusion_leaves_other_heads_at_zero() {
        let (model, texts, images) = setup(3, 3);
        let batch = Batch::Pairs {
            texts: refs(&texts),
            images: refs(&images[..3]),
        };
        let obj = Objective {
            fusion: Fusion::Single(Platform::Drone),
            loss: LossKind::InfoNce,
        };
        let (_, g) = compute_gradients(&model, &batch, &obj).unwrap();
        for (id, t) in g.tensors() {
            if id.group != crate::model::ParamGroup::Expert(Platform::Drone) {
                assert!(t.iter().all(|&x| x == 0.0), "{id} should be zero");
            }
        }
    }

    #[test]
    fn satisfied_triplets_have_zero_gradient() {
        let (model, texts, images) = setup(4, 2);
        // negative identical to the positive: loss is exactly the margin
        let t = refs(&texts);
        let batch = Batch::Triplets {
            texts: t.clone(),
            positives: refs(&images[..2]),
            negatives: refs(&images[..2]),
        };
        let obj = Objective {
            fusion: Fusion::Gated,
            loss: LossKind::Triplet { margin: 0.2 },
        };
        let (loss, _) = compute_gradients(&model, &batch, &obj).unwrap();
        assert!((loss - 0.2).abs() < 1e-12);

        let obj = Objective {
            fusion: Fusion::Gated,
            loss: LossKind::Triplet { margin: 1e-9 },
        };
        let sm = score_matrix_raw(&model, Fusion::Gated, &t, &refs(&images)).unwrap();
        // order each pair so the better-scoring image is the positive
        let (mut pos, mut neg) = (Vec::new(), Vec::new());
        for i in 0..2 {
            let (a, b) = (i, 2 + i);
            if sm.get(i, a) > sm.get(i, b) + 1e-6 {
                pos.push(images[a].as_slice());
                neg.push(images[b].as_slice());
            } else {
                pos.push(images[b].as_slice());
                neg.push(images[a].as_slice());
            }
        }
        let batch = Batch::Triplets {
            texts: t,
            positives: pos,
            negatives: neg,
        };
        let (loss, g) = compute_gradients(&model, &batch, &obj).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.tensors().iter().all(|(_, t)| t.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn mismatched_batch_and_loss() {
        let (model, texts, images) = setup(5, 2);
        let batch = Batch::Pairs {
            texts: refs(&texts),
            images: refs(&images[..2]),
        };
        let obj = Objective {
            fusion: Fusion::Gated,
            loss: LossKind::Triplet { margin: 0.2 },
        };
        assert!(compute_gradients(&model, &batch, &obj).is_err());
        let short = Batch::Pairs {
            texts: refs(&texts),
            images: refs(&images[..1]),
        };
        let obj = Objective {
            fusion: Fusion::Gated,
            loss: LossKind::InfoNce,
        };
        assert!(matches!(
            compute_gradients(&model, &short, &obj),
            Err(PemoeError::DimensionMismatch { .. })
        ));
    }
}
