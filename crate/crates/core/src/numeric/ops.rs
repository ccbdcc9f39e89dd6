//! Row-wise primitives with their hand-derived backward passes.

use crate::error::{Error, Result};
use crate::numeric::Matrix;

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Numerically stable softmax of every row (per-row max subtraction).
pub fn softmax_rows(m: &Matrix) -> Result<Matrix> {
    if m.is_empty() {
        return Err(Error::domain("softmax of an empty matrix"));
    }
    if !m.is_finite() {
        return Err(Error::domain("softmax input contains non-finite entries"));
    }
    let mut out = m.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    Ok(out)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Given `a = softmax(s)` row-wise and `da`, returns `ds`.
pub(crate) fn softmax_rows_backward(a: &Matrix, da: &Matrix) -> Matrix {
    let mut ds = Matrix::zeros(a.rows(), a.cols());
    for r in 0..a.rows() {
        let ar = a.row(r);
        let dar = da.row(r);
        let inner: f64 = ar.iter().zip(dar).map(|(x, y)| x * y).sum();
        for ((o, &x), &y) in ds.row_mut(r).iter_mut().zip(ar).zip(dar) {
            *o = x * (y - inner);
        }
    }
    ds
}

/// `−log softmax(logits)[label]` for a single 1×K row of logits.
pub fn cross_entropy(logits: &Matrix, label: usize) -> Result<f64> {
    if logits.rows() != 1 || logits.cols() == 0 {
        return Err(Error::domain(format!(
            "cross_entropy expects a non-empty 1xK row, got {}x{}",
            logits.rows(),
            logits.cols()
        )));
    }
    if label >= logits.cols() {
        return Err(Error::domain(format!(
            "label {label} out of range for {} classes",
            logits.cols()
        )));
    }
    Ok(softmax_cross_entropy(logits.row(0), label).0)
}

/// Loss and gradient with respect to the logits. `label` must be in range.
pub(crate) fn softmax_cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|v| (v - max).exp()).sum();
    let log_z = max + sum.ln();
    let loss = log_z - logits[label];
    let mut grad: Vec<f64> = logits.iter().map(|v| (v - log_z).exp()).collect();
    grad[label] -= 1.0;
    (loss, grad)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Saved statistics of a row-wise layer norm.
#[derive(Debug, Clone)]
pub(crate) struct LayerNormCache {
    pub xhat: Matrix,
    pub inv_std: Vec<f64>,
}

pub(crate) fn layer_norm_rows(
    x: &Matrix,
    gamma: &[f64],
    beta: &[f64],
) -> (Matrix, LayerNormCache) {
    let d = x.cols();
    let mut xhat = Matrix::zeros(x.rows(), d);
    let mut y = Matrix::zeros(x.rows(), d);
    let mut inv_std = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std.push(is);
        let xh = xhat.row_mut(r);
        for (o, v) in xh.iter_mut().zip(row) {
            *o = (v - mean) * is;
        }
        let xh = xhat.row(r).to_vec();
        for (((o, h), g), b) in y.row_mut(r).iter_mut().zip(&xh).zip(gamma).zip(beta) {
            *o = h * g + b;
        }
    }
    (y, LayerNormCache { xhat, inv_std })
}

/// Backward of [`layer_norm_rows`]. Accumulates parameter gradients into
/// `dgamma`/`dbeta` when given.
pub(crate) fn layer_norm_rows_backward(
    cache: &LayerNormCache,
    gamma: &[f64],
    dy: &Matrix,
    mut param_grads: Option<(&mut [f64], &mut [f64])>,
) -> Matrix {
    let d = dy.cols();
    let mut dx = Matrix::zeros(dy.rows(), d);
    let mut dxhat = vec![0.0; d];
    for r in 0..dy.rows() {
        let dyr = dy.row(r);
        let xh = cache.xhat.row(r);
        if let Some((dg, db)) = param_grads.as_mut() {
            for c in 0..d {
                dg[c] += dyr[c] * xh[c];
                db[c] += dyr[c];
            }
        }
        for c in 0..d {
            dxhat[c] = dyr[c] * gamma[c];
        }
        let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dxhat_xhat = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        let is = cache.inv_std[r];
        for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
            *o = is * (dxhat[c] - mean_dxhat - xh[c] * mean_dxhat_xhat);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// GELU, tanh approximation.
#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

#[inline]
pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}
