use crate::rng::SplitMix64;

/// Affine map `y = W x + b` with `W` stored row-major as `out_dim x in_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    in_dim: usize,
    out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Linear {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut l = Linear::zeros(dim, dim);
        for i in 0..dim {
            l.weight[i * dim + i] = 1.0;
        }
        l
    }

    /// Weights uniform in `±sqrt(6 / (in + out))`, zero bias.
    pub fn glorot(in_dim: usize, out_dim: usize, rng: &mut SplitMix64) -> Self {
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let mut l = Linear::zeros(in_dim, out_dim);
        l.weight.iter_mut().for_each(|w| *w = rng.symmetric(bound));
        l
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_dim);
        self.weight
            .chunks_exact(self.in_dim)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).fold(*b, |acc, (w, xi)| acc + w * xi))
            .collect()
    }

    /// Accumulates `dL/dW` and `dL/db` into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &[f64], dy: &[f64], grad: &mut Linear) -> Vec<f64> {
        let mut dx = vec![0.0; self.in_dim];
        for (o, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad.bias[o] += g;
            let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
            let grow = &mut grad.weight[o * self.in_dim..(o + 1) * self.in_dim];
            for i in 0..self.in_dim {
                grow[i] += g * x[i];
                dx[i] += g * row[i];
            }
        }
        dx
    }
}

pub fn relu(mut x: Vec<f64>) -> Vec<f64> {
    x.iter_mut().for_each(|v| *v = v.max(0.0));
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forward_and_backward_by_hand() {
        let mut l = Linear::zeros(2, 2);
        l.weight = vec![1.0, 2.0, -3.0, 0.5];
        l.bias = vec![0.1, -0.2];
        let x = [2.0, -1.0];
        assert_eq!(l.forward(&x), vec![0.1 + 2.0 - 2.0, -0.2 - 6.0 - 0.5]);
        let mut g = Linear::zeros(2, 2);
        let dx = l.backward(&x, &[1.0, 2.0], &mut g);
        assert_eq!(g.weight, vec![2.0, -1.0, 4.0, -2.0]);
        assert_eq!(g.bias, vec![1.0, 2.0]);
        assert_eq!(dx, vec![1.0 - 6.0, 2.0 + 1.0]);
    }
}
