//! Mixture-of-experts scoring: platform expert heads over shared embeddings,
//! a softmax gate over the text embedding, and convex fusion of the expert
//! cosine scores.

mod checkpoint;
mod linear;

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{GalleryItem, PerPlatform, Platform, QueryRecord};
use crate::error::{PemoeError, Result};
use crate::rng::SplitMix64;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use linear::{relu, Linear};

pub const DEFAULT_TEMPERATURE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub d_t: usize,
    pub d_v: usize,
    /// Common embedding size of the expert outputs.
    pub d_e: usize,
    /// Gate hidden width.
    pub h_g: usize,
    /// Expert text adapter hidden width.
    pub h_e: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("d_t", self.d_t),
            ("d_v", self.d_v),
            ("d_e", self.d_e),
            ("h_g", self.h_g),
            ("h_e", self.h_e),
        ] {
            if v == 0 {
                return Err(PemoeError::invalid(name, "dimension must be positive"));
            }
        }
        Ok(())
    }
}

/// Gate output: non-negative weights summing to one, ordered sat, drone, ground.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateWeights(pub [f64; 3]);

/// Per-expert cosine similarities, ordered sat, drone, ground.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreVector(pub [f64; 3]);

/// Softmax with max subtraction.
pub fn softmax3(logits: [f64; 3]) -> [f64; 3] {
    let m = logits[0].max(logits[1]).max(logits[2]);
    let e = logits.map(|z| (z - m).exp());
    let s = e[0] + e[1] + e[2];
    e.map(|x| x / s)
}

/// `sum_k g_k * s_k`, clamped to `[min_k s_k, max_k s_k]` so rounding can
/// never leave the convex hull of the expert scores.
pub fn fuse(weights: &GateWeights, scores: &ScoreVector) -> f64 {
    let s = scores.0;
    let g = weights.0;
    let raw = g[0] * s[0] + g[1] * s[1] + g[2] * s[2];
    let lo = s[0].min(s[1]).min(s[2]);
    let hi = s[0].max(s[1]).max(s[2]);
    raw.clamp(lo, hi)
}

/// How expert scores are combined into one ranking score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Fusion {
    /// Query-dependent gate weights.
    Gated,
    /// Fixed weights on the simplex.
    Static([f64; 3]),
    /// One expert's score only. Used for the unified single-head baseline.
    Single(Platform),
}

impl Fusion {
    pub fn equal() -> Fusion {
        Fusion::Static([1.0 / 3.0; 3])
    }

    /// Experts whose score can influence the fused value.
    pub fn active(&self) -> [bool; 3] {
        match self {
            Fusion::Gated => [true; 3],
            Fusion::Static(w) => w.map(|x| x != 0.0),
            Fusion::Single(p) => {
                let mut a = [false; 3];
                a[p.index()] = true;
                a
            }
        }
    }

    pub fn uses_gate(&self) -> bool {
        matches!(self, Fusion::Gated)
    }
}

impl fmt::Display for Fusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Fusion::Gated => f.write_str("gated"),
            Fusion::Static(w) => write!(f, "static({},{},{})", w[0], w[1], w[2]),
            Fusion::Single(p) => write!(f, "single:{p}"),
        }
    }
}

impl std::str::FromStr for Fusion {
    type Err = PemoeError;

    /// `gated`, `static` (equal weights), `static:a,b,c`, or `single:<platform>`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || PemoeError::invalid("fusion", format!("`{s}`"));
        match s {
            "gated" => Ok(Fusion::Gated),
            "static" => Ok(Fusion::equal()),
            _ => {
                if let Some(p) = s.strip_prefix("single:") {
                    Ok(Fusion::Single(p.parse()?))
                } else if let Some(w) = s.strip_prefix("static:") {
                    let v: Vec<f64> = w
                        .split(',')
                        .map(|x| x.trim().parse::<f64>().map_err(|_| bad()))
                        .collect::<Result<_>>()?;
                    let [a, b, c] = v[..] else { return Err(bad()) };
                    let sum = a + b + c;
                    if [a, b, c].iter().any(|x| !(*x >= 0.0)) || !(sum > 0.0) {
                        return Err(bad());
                    }
                    Ok(Fusion::Static([a / sum, b / sum, c / sum]))
                } else {
                    Err(bad())
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateNetwork {
    pub layer1: Linear,
    pub layer2: Linear,
}

impl GateNetwork {
    pub fn logits(&self, t: &[f64]) -> Result<[f64; 3]> {
        check_dim("gate input", self.layer1.in_dim(), t.len())?;
        let hidden = relu(self.layer1.forward(t));
        let z = self.layer2.forward(&hidden);
        Ok([z[0], z[1], z[2]])
    }

    pub fn forward(&self, t: &[f64]) -> Result<GateWeights> {
        Ok(GateWeights(softmax3(self.logits(t)?)))
    }
}

/// Trainable head of one platform: a two-layer text adapter and a visual
/// projection into the shared `d_e` space.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertHead {
    pub platform: Platform,
    pub adapter1: Linear,
    pub adapter2: Linear,
    pub projection: Linear,
}

impl ExpertHead {
    pub fn encode_text(&self, t: &[f64]) -> Result<Vec<f64>> {
        check_dim("expert text input", self.adapter1.in_dim(), t.len())?;
        let hidden = relu(self.adapter1.forward(t));
        normalize(self.adapter2.forward(&hidden), "text adapter output")
    }

    pub fn encode_image(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_dim("expert image input", self.projection.in_dim(), v.len())?;
        normalize(self.projection.forward(v), "visual projection output")
    }

    /// Unit-norm `(t_k, v_k)`.
    pub fn forward(&self, t: &[f64], v: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        Ok((self.encode_text(t)?, self.encode_image(v)?))
    }

    /// Cosine similarity of the two expert embeddings.
    pub fn score(&self, t: &[f64], v: &[f64]) -> Result<f64> {
        let (tk, vk) = self.forward(t, v)?;
        Ok(dot(&tk, &vk))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PeMoeModel {
    pub gate: GateNetwork,
    pub experts: PerPlatform<ExpertHead>,
    /// Softmax temperature of the contrastive loss. Ranking ignores it.
    pub temperature: f64,
}

/// Encoded query: gate weights (when gated) and each active expert's text embedding.
#[derive(Debug, Clone)]
pub struct QueryEncoding {
    pub weights: [f64; 3],
    pub text: PerPlatform<Option<Vec<f64>>>,
}

#[derive(Debug, Clone)]
pub struct ItemEncoding {
    pub image: PerPlatform<Option<Vec<f64>>>,
}

impl PeMoeModel {
    /// Uniform fan-in/fan-out initialization (`bound = sqrt(6 / (fan_in + fan_out))`)
    /// with zero biases. Weight matrices are drawn row-major in checkpoint order.
    pub fn init(dims: ModelDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = SplitMix64::new(seed);
        let gate = GateNetwork {
            layer1: Linear::glorot(dims.d_t, dims.h_g, &mut rng),
            layer2: Linear::glorot(dims.h_g, 3, &mut rng),
        };
        let experts = PerPlatform::from_fn(|platform| ExpertHead {
            platform,
            adapter1: Linear::glorot(dims.d_t, dims.h_e, &mut rng),
            adapter2: Linear::glorot(dims.h_e, dims.d_e, &mut rng),
            projection: Linear::glorot(dims.d_v, dims.d_e, &mut rng),
        });
        Ok(PeMoeModel {
            gate,
            experts,
            temperature: DEFAULT_TEMPERATURE,
        })
    }

    pub fn dims(&self) -> ModelDims {
        let e = &self.experts[Platform::Satellite];
        ModelDims {
            d_t: self.gate.layer1.in_dim(),
            d_v: e.projection.in_dim(),
            d_e: e.adapter2.out_dim(),
            h_g: self.gate.layer1.out_dim(),
            h_e: e.adapter1.out_dim(),
        }
    }

    pub fn gate_forward(&self, t: &[f64]) -> Result<GateWeights> {
        self.gate.forward(t)
    }

    pub fn expert_forward(&self, p: Platform, t: &[f64], v: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.experts[p].forward(t, v)
    }

    pub fn expert_score(&self, p: Platform, t: &[f64], v: &[f64]) -> Result<f64> {
        self.experts[p].score(t, v)
    }

    pub fn fusion_weights(&self, fusion: Fusion, t: &[f64]) -> Result<[f64; 3]> {
        match fusion {
            Fusion::Gated => Ok(self.gate_forward(t)?.0),
            Fusion::Static(w) => Ok(w),
            Fusion::Single(p) => {
                let mut w = [0.0; 3];
                w[p.index()] = 1.0;
                Ok(w)
            }
        }
    }

    pub fn encode_query(&self, fusion: Fusion, t: &[f64]) -> Result<QueryEncoding> {
        let active = fusion.active();
        let mut text = PerPlatform::<Option<Vec<f64>>>::default();
        for p in Platform::ALL {
            if active[p.index()] {
                text[p] = Some(self.experts[p].encode_text(t)?);
            }
        }
        Ok(QueryEncoding {
            weights: self.fusion_weights(fusion, t)?,
            text,
        })
    }

    pub fn encode_item(&self, fusion: Fusion, v: &[f64]) -> Result<ItemEncoding> {
        let active = fusion.active();
        let mut image = PerPlatform::<Option<Vec<f64>>>::default();
        for p in Platform::ALL {
            if active[p.index()] {
                image[p] = Some(self.experts[p].encode_image(v)?);
            }
        }
        Ok(ItemEncoding { image })
    }

    /// Scalar pipeline for one (query, item) pair.
    pub fn score(&self, fusion: Fusion, t: &[f64], v: &[f64]) -> Result<f64> {
        let q = self.encode_query(fusion, t)?;
        let i = self.encode_item(fusion, v)?;
        Ok(fused_score(fusion, &q, &i))
    }

    /// Rounds every parameter to the nearest `f32`, the checkpoint precision.
    pub fn snap_to_f32(&mut self) {
        for t in self.tensors_mut() {
            for x in t.iter_mut() {
                *x = f64::from(*x as f32);
            }
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// All parameter tensors in checkpoint order.
    pub fn tensors(&self) -> Vec<(TensorId, &[f64])> {
        tensor_list(&self.gate, &self.experts)
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        tensor_list_mut(&mut self.gate, &mut self.experts)
    }
}

/// Which module a parameter tensor belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Gate,
    Expert(Platform),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId {
    pub group: ParamGroup,
    pub name: &'static str,
}

impl fmt::Display for TensorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.group {
            ParamGroup::Gate => write!(f, "gate.{}", self.name),
            ParamGroup::Expert(p) => write!(f, "{p}.{}", self.name),
        }
    }
}

pub(crate) fn tensor_list<'a>(
    gate: &'a GateNetwork,
    experts: &'a PerPlatform<ExpertHead>,
) -> Vec<(TensorId, &'a [f64])> {
    let g = |name| TensorId {
        group: ParamGroup::Gate,
        name,
    };
    let mut out: Vec<(TensorId, &[f64])> = vec![
        (g("layer1.weight"), &gate.layer1.weight),
        (g("layer1.bias"), &gate.layer1.bias),
        (g("layer2.weight"), &gate.layer2.weight),
        (g("layer2.bias"), &gate.layer2.bias),
    ];
    for (p, e) in experts.iter() {
        let id = |name| TensorId {
            group: ParamGroup::Expert(p),
            name,
        };
        out.extend([
            (id("adapter1.weight"), e.adapter1.weight.as_slice()),
            (id("adapter1.bias"), &e.adapter1.bias),
            (id("adapter2.weight"), &e.adapter2.weight),
            (id("adapter2.bias"), &e.adapter2.bias),
            (id("projection.weight"), &e.projection.weight),
            (id("projection.bias"), &e.projection.bias),
        ]);
    }
    out
}

pub(crate) fn tensor_list_mut<'a>(
    gate: &'a mut GateNetwork,
    experts: &'a mut PerPlatform<ExpertHead>,
) -> Vec<&'a mut Vec<f64>> {
    let mut out = vec![
        &mut gate.layer1.weight,
        &mut gate.layer1.bias,
        &mut gate.layer2.weight,
        &mut gate.layer2.bias,
    ];
    for (_, e) in experts.iter_mut() {
        out.extend([
            &mut e.adapter1.weight,
            &mut e.adapter1.bias,
            &mut e.adapter2.weight,
            &mut e.adapter2.bias,
            &mut e.projection.weight,
            &mut e.projection.bias,
        ]);
    }
    out
}

pub fn fused_score(fusion: Fusion, q: &QueryEncoding, item: &ItemEncoding) -> f64 {
    let expert = |p: Platform| -> f64 {
        match (&q.text[p], &item.image[p]) {
            (Some(t), Some(v)) => dot(t, v),
            _ => 0.0,
        }
    };
    if let Fusion::Single(p) = fusion {
        return expert(p);
    }
    let active = fusion.active();
    let (mut raw, mut lo, mut hi) = (0.0, f64::INFINITY, f64::NEG_INFINITY);
    for p in Platform::ALL.into_iter().filter(|p| active[p.index()]) {
        let s = expert(p);
        raw += q.weights[p.index()] * s;
        lo = lo.min(s);
        hi = hi.max(s);
    }
    raw.clamp(lo, hi)
}

/// Row-major `|Q| x |G|` matrix of fused scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl ScoreMatrix {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }
}

/// Fused scores of every query against every gallery item. Rows are
/// computed in parallel; each entry is computed the same way regardless
/// of thread count.
pub fn score_matrix(
    model: &PeMoeModel,
    fusion: Fusion,
    queries: &[QueryRecord],
    gallery: &[GalleryItem],
) -> Result<ScoreMatrix> {
    let texts: Vec<&[f64]> = queries.iter().map(|q| q.text_embedding.as_slice()).collect();
    let images: Vec<&[f64]> = gallery.iter().map(|g| g.image_embedding.as_slice()).collect();
    score_matrix_raw(model, fusion, &texts, &images)
}

pub fn score_matrix_raw(
    model: &PeMoeModel,
    fusion: Fusion,
    texts: &[&[f64]],
    images: &[&[f64]],
) -> Result<ScoreMatrix> {
    let items: Vec<ItemEncoding> = images
        .par_iter()
        .map(|v| model.encode_item(fusion, v))
        .collect::<Result<_>>()?;
    let rows: Vec<Vec<f64>> = texts
        .par_iter()
        .map(|t| {
            let q = model.encode_query(fusion, t)?;
            Ok(items.iter().map(|it| fused_score(fusion, &q, it)).collect())
        })
        .collect::<Result<_>>()?;
    Ok(ScoreMatrix {
        rows: texts.len(),
        cols: images.len(),
        values: rows.concat(),
    })
}

/// Dot product accumulated in ascending index order.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

pub(crate) fn normalize(mut x: Vec<f64>, context: &str) -> Result<Vec<f64>> {
    let norm = dot(&x, &x).sqrt();
    if !norm.is_finite() {
        return Err(PemoeError::NonFinite {
            context: context.into(),
        });
    }
    if norm < f64::MIN_POSITIVE {
        return Err(PemoeError::DegenerateEmbedding {
            context: context.into(),
        });
    }
    x.iter_mut().for_each(|v| *v /= norm);
    Ok(x)
}

fn check_dim(context: &str, expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(PemoeError::dims(context, expected, found));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dims() -> ModelDims {
        ModelDims {
            d_t: 5,
            d_v: 4,
            d_e: 3,
            h_g: 6,
            h_e: 7,
        }
    }

    fn vec_in(rng: &mut SplitMix64, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gaussian()).collect()
    }

    #[test]
    fn zero_gate_is_uniform() {
        let mut m = PeMoeModel::init(dims(), 1).unwrap();
        m.gate.layer1 = Linear::zeros(5, 6);
        m.gate.layer2 = Linear::zeros(6, 3);
        let w = m.gate_forward(&[1.0, -2.0, 0.5, 3.0, 0.0]).unwrap();
        for x in w.0 {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_hand_values() {
        let w = softmax3([2f64.ln(), 0.0, 0.0]);
        assert!((w[0] - 0.5).abs() < 1e-15);
        assert!((w[1] - 0.25).abs() < 1e-15);
        assert!((w[2] - 0.25).abs() < 1e-15);
        let shifted = softmax3([2f64.ln() + 7.0, 7.0, 7.0]);
        for k in 0..3 {
            assert!((w[k] - shifted[k]).abs() < 1e-12);
        }
        let extreme = softmax3([1e4, -1e4, 0.0]);
        assert_eq!(extreme, [1.0, 0.0, 0.0]);
    }

    #[test]
    fn gate_rejects_wrong_dim() {
        let m = PeMoeModel::init(dims(), 1).unwrap();
        assert!(matches!(
            m.gate_forward(&[1.0; 4]),
            Err(PemoeError::DimensionMismatch { expected: 5, found: 4, .. })
        ));
    }

    #[test]
    fn identity_projection_keeps_unit_input() {
        let mut head = PeMoeModel::init(dims(), 2).unwrap().experts[Platform::Drone].clone();
        head.projection = Linear::identity(4);
        let v = [0.5, -0.5, 0.5, 0.5];
        assert_eq!(head.encode_image(&v).unwrap(), v.to_vec());
    }

    #[test]
    fn expert_outputs_are_unit_and_scale_free() {
        let m = PeMoeModel::init(dims(), 3).unwrap();
        let mut rng = SplitMix64::new(4);
        for _ in 0..50 {
            let t = vec_in(&mut rng, 5);
            let v = vec_in(&mut rng, 4);
            let (tk, vk) = m.expert_forward(Platform::Ground, &t, &v).unwrap();
            assert!((dot(&tk, &tk).sqrt() - 1.0).abs() < 1e-6);
            assert!((dot(&vk, &vk).sqrt() - 1.0).abs() < 1e-6);
            // projection bias is zero at init, so scaling the input is invisible
            let v5: Vec<f64> = v.iter().map(|x| x * 5.0).collect();
            let vk5 = m.experts[Platform::Ground].encode_image(&v5).unwrap();
            for (a, b) in vk.iter().zip(&vk5) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_projection_is_degenerate() {
        let mut m = PeMoeModel::init(dims(), 3).unwrap();
        m.experts[Platform::Satellite].projection = Linear::zeros(4, 3);
        assert!(matches!(
            m.experts[Platform::Satellite].encode_image(&[1.0; 4]),
            Err(PemoeError::DegenerateEmbedding { .. })
        ));
    }

    #[test]
    fn cosine_extremes() {
        // d_t = d_v = d_e with identity layers, so t_k and v_k are the
        // normalized inputs.
        let d = ModelDims {
            d_t: 3,
            d_v: 3,
            d_e: 3,
            h_g: 2,
            h_e: 6,
        };
        let mut m = PeMoeModel::init(d, 0).unwrap();
        let e = &mut m.experts[Platform::Satellite];
        e.projection = Linear::identity(3);
        // relu(x) - relu(-x) = x
        let mut a1 = Linear::zeros(3, 6);
        let mut a2 = Linear::zeros(6, 3);
        for i in 0..3 {
            a1.weight[i * 3 + i] = 1.0;
            a1.weight[(i + 3) * 3 + i] = -1.0;
            a2.weight[i * 6 + i] = 1.0;
            a2.weight[i * 6 + i + 3] = -1.0;
        }
        e.adapter1 = a1;
        e.adapter2 = a2;
        let s = |t: [f64; 3], v: [f64; 3]| m.expert_score(Platform::Satellite, &t, &v).unwrap();
        assert!((s([1.0, 2.0, -1.0], [2.0, 4.0, -2.0]) - 1.0).abs() < 1e-15);
        assert!(s([1.0, 0.0, 0.0], [0.0, 3.0, 0.0]).abs() < 1e-15);
        assert!((s([1.0, 2.0, -1.0], [-1.0, -2.0, 1.0]) + 1.0).abs() < 1e-15);
    }

    #[test]
    fn fuse_examples() {
        let f = |w: [f64; 3], s: [f64; 3]| fuse(&GateWeights(w), &ScoreVector(s));
        assert_eq!(f([1.0, 0.0, 0.0], [0.7, 0.2, -0.1]), 0.7);
        for x in [-1.0, -0.3, 0.0, 0.123456789, 1.0] {
            assert_eq!(f([1.0 / 3.0; 3], [x; 3]), x);
        }
        // 0.5*0.8 + 0.3*0.4 + 0.2*0.2 = 0.40 + 0.12 + 0.04
        assert!((f([0.5, 0.3, 0.2], [0.8, 0.4, 0.2]) - 0.56).abs() < 1e-15);
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = PeMoeModel::init(dims(), 9).unwrap();
        let b = PeMoeModel::init(dims(), 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, PeMoeModel::init(dims(), 10).unwrap());
        let check = |l: &Linear| {
            let bound = (6.0 / (l.in_dim() + l.out_dim()) as f64).sqrt();
            assert!(l.bias.iter().all(|&x| x == 0.0));
            assert!(l.weight.iter().all(|x| x.abs() <= bound));
        };
        check(&a.gate.layer1);
        check(&a.gate.layer2);
        for (_, e) in a.experts.iter() {
            check(&e.adapter1);
            check(&e.adapter2);
            check(&e.projection);
        }
        let mut bad = dims();
        bad.h_e = 0;
        assert!(PeMoeModel::init(bad, 1).is_err());
    }

    #[test]
    fn tensor_order_and_count() {
        let m = PeMoeModel::init(dims(), 1).unwrap();
        let names: Vec<String> = m.tensors().iter().map(|(id, _)| id.to_string()).collect();
        assert_eq!(names.len(), 22);
        assert_eq!(names[0], "gate.layer1.weight");
        assert_eq!(names[4], "sat.adapter1.weight");
        assert_eq!(names[21], "ground.projection.bias");
        let expected = 5 * 6 + 6 + 6 * 3 + 3 + 3 * (5 * 7 + 7 + 7 * 3 + 3 + 4 * 3 + 3);
        assert_eq!(m.num_parameters(), expected);
    }

    #[test]
    fn score_matrix_matches_pairwise_pipeline() {
        let m = PeMoeModel::init(dims(), 5).unwrap();
        let mut rng = SplitMix64::new(6);
        let texts: Vec<Vec<f64>> = (0..5).map(|_| vec_in(&mut rng, 5)).collect();
        let mut images: Vec<Vec<f64>> = (0..7).map(|_| vec_in(&mut rng, 4)).collect();
        images[6] = images[2].clone();
        let tr: Vec<&[f64]> = texts.iter().map(Vec::as_slice).collect();
        let ir: Vec<&[f64]> = images.iter().map(Vec::as_slice).collect();
        for fusion in [Fusion::Gated, Fusion::equal(), Fusion::Single(Platform::Drone)] {
            let sm = score_matrix_raw(&m, fusion, &tr, &ir).unwrap();
            for i in 0..5 {
                for j in 0..7 {
                    // independent per-pair oracle: weights and each expert score separately
                    let w = m.fusion_weights(fusion, &texts[i]).unwrap();
                    let s = Platform::ALL.map(|p| m.expert_score(p, &texts[i], &images[j]).unwrap());
                    let oracle: f64 = (0..3).map(|k| w[k] * s[k]).sum();
                    assert!((sm.get(i, j) - oracle).abs() < 1e-9);
                    assert_eq!(sm.get(i, j), m.score(fusion, &texts[i], &images[j]).unwrap());
                }
                assert_eq!(sm.get(i, 2), sm.get(i, 6));
            }
        }
        let single = score_matrix_raw(&m, Fusion::Gated, &tr[..1], &ir[..1]).unwrap();
        assert_eq!(single.values, vec![m.score(Fusion::Gated, &texts[0], &images[0]).unwrap()]);
    }

    #[test]
    fn fusion_parsing() {
        assert_eq!("gated".parse::<Fusion>().unwrap(), Fusion::Gated);
        assert_eq!("static".parse::<Fusion>().unwrap(), Fusion::equal());
        assert_eq!(
            "single:drone".parse::<Fusion>().unwrap(),
            Fusion::Single(Platform::Drone)
        );
        assert_eq!(
            "static:2,1,1".parse::<Fusion>().unwrap(),
            Fusion::Static([0.5, 0.25, 0.25])
        );
        assert!("static:1,2".parse::<Fusion>().is_err());
        assert!("static:-1,1,1".parse::<Fusion>().is_err());
    }

    proptest! {
        #[test]
        fn fusion_stays_in_hull(
            raw in proptest::array::uniform3(0.0f64..1.0),
            s in proptest::array::uniform3(-1.0f64..=1.0),
        ) {
            let total: f64 = raw.iter().sum::<f64>() + 1e-12;
            let w = raw.map(|x| (x + 1e-12 / 3.0) / total);
            let f = fuse(&GateWeights(w), &ScoreVector(s));
            let lo = s.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(lo <= f && f <= hi);
        }

        #[test]
        fn gate_on_simplex(t in proptest::collection::vec(-50.0f64..50.0, 5), seed in 0u64..100) {
            let m = PeMoeModel::init(dims(), seed).unwrap();
            let w = m.gate_forward(&t).unwrap().0;
            prop_assert!(w.iter().all(|&x| x >= 0.0));
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }

        #[test]
        fn cosine_bounded(
            t in proptest::collection::vec(-10.0f64..10.0, 5),
            v in proptest::collection::vec(-10.0f64..10.0, 4),
            seed in 0u64..50,
        ) {
            let m = PeMoeModel::init(dims(), seed).unwrap();
            for p in Platform::ALL {
                if let Ok(s) = m.expert_score(p, &t, &v) {
                    prop_assert!(s.abs() <= 1.0 + 1e-9);
                }
            }
        }
    }
}
