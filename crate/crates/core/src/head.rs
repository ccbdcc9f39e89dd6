//! Growing linear classifier head shared by both prediction stages, the
//! baselines, and backbone pretraining.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{dot, Matrix};

pub const HEAD_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearHead {
    /// classes × D
    weight: Matrix,
    bias: Vec<f64>,
}

impl LinearHead {
    pub fn new(dim: usize) -> Self {
        Self {
            weight: Matrix::zeros(0, dim),
            bias: Vec::new(),
        }
    }

    pub fn from_parts(weight: Matrix, bias: Vec<f64>) -> Result<Self> {
        if weight.rows() != bias.len() {
            return Err(Error::domain(format!(
                "{} weight rows but {} biases",
                weight.rows(),
                bias.len()
            )));
        }
        Ok(Self { weight, bias })
    }

    pub fn classes(&self) -> usize {
        self.bias.len()
    }

    pub fn dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn weight(&self) -> &Matrix {
        &self.weight
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    /// Appends `n` rows drawn i.i.d. from N(0, std²); biases start at zero.
    pub fn extend(&mut self, n: usize, std: f64, rng: &mut impl Rng) {
        let new_rows = Matrix::randn(n, self.dim(), std, rng);
        self.weight = Matrix::vstack(&[&self.weight, &new_rows]);
        self.bias.extend(std::iter::repeat_n(0.0, n));
    }

    pub fn logits(&self, feature: &[f64]) -> Vec<f64> {
        debug_assert_eq!(feature.len(), self.dim());
        self.weight
            .iter_rows()
            .zip(&self.bias)
            .map(|(w, b)| dot(w, feature) + b)
            .collect()
    }

    /// Accumulates `∂L/∂W += dlogits ⊗ f`, `∂L/∂b += dlogits` into `grads`
    /// and returns `∂L/∂f = Wᵀ dlogits`.
    pub fn backward(&self, feature: &[f64], dlogits: &[f64], grads: &mut LinearHead) -> Vec<f64> {
        let d = self.dim();
        let mut d_feature = vec![0.0; d];
        for (k, &g) in dlogits.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grads.bias[k] += g;
            let gw = grads.weight.row_mut(k);
            for (a, &f) in gw.iter_mut().zip(feature) {
                *a += g * f;
            }
            for (df, &w) in d_feature.iter_mut().zip(self.weight.row(k)) {
                *df += g * w;
            }
        }
        d_feature
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: Matrix::zeros(self.weight.rows(), self.weight.cols()),
            bias: vec![0.0; self.bias.len()],
        }
    }

    pub fn num_params(&self) -> usize {
        self.weight.data().len() + self.bias.len()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.weight.data().to_vec();
        v.extend_from_slice(&self.bias);
        v
    }

    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::domain("flat head buffer has the wrong length"));
        }
        let n = self.weight.data().len();
        self.weight.data_mut().copy_from_slice(&flat[..n]);
        self.bias.copy_from_slice(&flat[n..]);
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        self.weight.scale(s);
        self.bias.iter_mut().for_each(|b| *b *= s);
    }

    /// Row `k` of the weight matrix (used by tests that hand-set a head).
    pub fn row_mut(&mut self, k: usize) -> (&mut [f64], &mut f64) {
        (self.weight.row_mut(k), &mut self.bias[k])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::finite_diff_check;
    use crate::numeric::ops::softmax_cross_entropy;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn extend_keeps_old_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut head = LinearHead::new(3);
        head.extend(2, 0.5, &mut rng);
        let before = head.clone();
        head.extend(4, 0.5, &mut rng);
        assert_eq!(head.classes(), 6);
        assert_eq!(head.weight().slice_rows(0..2), *before.weight());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut head = LinearHead::new(4);
        head.extend(3, 1.0, &mut rng);
        let f = [0.3, -0.2, 1.1, 0.5];
        let (_, dl) = softmax_cross_entropy(&head.logits(&f), 2);
        let mut g = head.zeros_like();
        head.backward(&f, &dl, &mut g);
        let loss = |flat: &[f64]| {
            let mut h = head.clone();
            h.load_flat(flat).unwrap();
            softmax_cross_entropy(&h.logits(&f), 2).0
        };
        let err = finite_diff_check(loss, &head.to_flat(), &g.to_flat(), 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }
}
