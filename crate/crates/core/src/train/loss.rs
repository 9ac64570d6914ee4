use crate::error::{PemoeError, Result};

/// Symmetric in-batch contrastive loss over a row-major `B x B` score
/// matrix whose diagonal holds the positive pairs.
///
/// `L = (mean_i CE_row(i) + mean_j CE_col(j)) / 2` with logits `s / tau`.
pub fn info_nce_loss(scores: &[f64], batch: usize, tau: f64) -> Result<f64> {
    info_nce_with_grad(scores, batch, tau).map(|(l, _)| l)
}

/// Loss and `dL/ds` for [`info_nce_loss`].
pub fn info_nce_with_grad(scores: &[f64], batch: usize, tau: f64) -> Result<(f64, Vec<f64>)> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(PemoeError::invalid("temperature", format!("{tau} must be positive")));
    }
    if scores.len() != batch * batch {
        return Err(PemoeError::dims("contrastive score matrix", batch * batch, scores.len()));
    }
    if batch == 0 {
        return Ok((0.0, Vec::new()));
    }
    let b = batch;
    let mut grad = vec![0.0; b * b];
    let half_mean = 0.5 / b as f64;
    let mut total = 0.0;
    let mut logits = vec![0.0; b];
    for axis in [Axis::Row, Axis::Col] {
        for i in 0..b {
            for (j, l) in logits.iter_mut().enumerate() {
                *l = scores[axis.at(i, j, b)] / tau;
            }
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            let lse = m + sum.ln();
            total += lse - logits[i];
            for (j, l) in logits.iter().enumerate() {
                let p = (l - m).exp() / sum;
                let target = if i == j { 1.0 } else { 0.0 };
                grad[axis.at(i, j, b)] += half_mean * (p - target) / tau;
            }
        }
    }
    Ok((half_mean * total, grad))
}

#[derive(Clone, Copy)]
enum Axis {
    Row,
    Col,
}

impl Axis {
    fn at(self, i: usize, j: usize, b: usize) -> usize {
        match self {
            Axis::Row => i * b + j,
            Axis::Col => j * b + i,
        }
    }
}

/// `max(0, margin - s_pos + s_neg)`.
pub fn triplet_loss(s_pos: f64, s_neg: f64, margin: f64) -> f64 {
    (margin - s_pos + s_neg).max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_pair_is_zero() {
        for s in [-0.7, 0.0, 0.93] {
            assert_eq!(info_nce_loss(&[s], 1, 0.05).unwrap(), 0.0);
        }
    }

    #[test]
    fn two_by_two_closed_form() {
        let l = info_nce_loss(&[1.0, -1.0, -1.0, 1.0], 2, 1.0).unwrap();
        let e = std::f64::consts::E;
        let expected = -(e / (e + 1.0 / e)).ln();
        assert!((l - expected).abs() < 1e-15);
        assert!((l - 0.1269).abs() < 1e-4);
    }

    #[test]
    fn equal_scores_give_log_b() {
        for b in [2usize, 3, 7] {
            let l = info_nce_loss(&vec![0.3; b * b], b, 0.05).unwrap();
            assert!((l - (b as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_temperature() {
        assert!(info_nce_loss(&[1.0], 1, 0.0).is_err());
        assert!(info_nce_loss(&[1.0], 1, -1.0).is_err());
    }

    #[test]
    fn gradient_matches_central_differences() {
        let b = 4;
        let scores: Vec<f64> = (0..b * b).map(|i| ((i * 37 % 11) as f64 / 11.0) - 0.5).collect();
        let (_, g) = info_nce_with_grad(&scores, b, 0.3).unwrap();
        let eps = 1e-6;
        for k in 0..b * b {
            let mut p = scores.clone();
            let mut m = scores.clone();
            p[k] += eps;
            m[k] -= eps;
            let fd = (info_nce_loss(&p, b, 0.3).unwrap() - info_nce_loss(&m, b, 0.3).unwrap()) / (2.0 * eps);
            assert!((fd - g[k]).abs() < 1e-8, "{k}: {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn triplet_examples() {
        assert_eq!(triplet_loss(0.9, 0.1, 0.2), 0.0);
        assert!((triplet_loss(0.5, 0.5, 0.2) - 0.2).abs() < 1e-15);
        assert!((triplet_loss(0.3, 0.6, 0.2) - 0.5).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn info_nce_nonnegative_and_monotone_in_diagonal(
            raw in proptest::collection::vec(-1.0f64..1.0, 9),
            k in 0usize..3,
            bump in 0.01f64..0.5,
        ) {
            let l = info_nce_loss(&raw, 3, 0.1).unwrap();
            prop_assert!(l >= 0.0);
            let mut up = raw.clone();
            up[k * 3 + k] += bump;
            prop_assert!(info_nce_loss(&up, 3, 0.1).unwrap() < l);
        }

        #[test]
        fn triplet_properties(sp in -1.0f64..1.0, sn in -1.0f64..1.0, m in 0.01f64..1.0) {
            let l = triplet_loss(sp, sn, m);
            prop_assert!(l >= 0.0);
            prop_assert_eq!(l == 0.0, sp >= sn + m);
            // convex in d = s_neg - s_pos: midpoint below chord
            let f = |d: f64| (m + d).max(0.0);
            let (d1, d2) = (sn - sp, sp - sn);
            prop_assert!(f((d1 + d2) / 2.0) <= (f(d1) + f(d2)) / 2.0 + 1e-15);
        }
    }
}
