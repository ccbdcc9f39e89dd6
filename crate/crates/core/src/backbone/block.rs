use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::ops::{gelu, gelu_grad, layer_norm_rows, layer_norm_rows_backward, LayerNormCache};
use crate::numeric::Matrix;

use super::attention::{msa_backward, msa_forward, Attention, AttentionCache};
use super::model::LayerPrompt;
use super::{BackboneConfig, LayerNorm};

/// Pre-norm transformer block: `x1 = h + MSA(LN1(h))`, `out = x1 + MLP(LN2(x1))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub norm1: LayerNorm,
    pub attention: Attention,
    pub norm2: LayerNorm,
    /// D × hidden
    pub w1: Matrix,
    pub b1: Vec<f64>,
    /// hidden × D
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

impl Block {
    pub fn init(config: &BackboneConfig, rng: &mut impl Rng) -> Self {
        let d = config.embed_dim;
        let hidden = config.mlp_hidden();
        // residual branches are damped so a deep stack starts near identity
        let branch = 1.0 / ((2 * config.depth.max(1)) as f64).sqrt();
        let mut attention = Attention::init(config, rng);
        attention.wo.scale(branch);
        let w1 = Matrix::randn(d, hidden, 1.0 / (d as f64).sqrt(), rng);
        let w2 = Matrix::randn(hidden, d, branch / (hidden as f64).sqrt(), rng);
        Self {
            norm1: LayerNorm::new(d),
            attention,
            norm2: LayerNorm::new(d),
            w1,
            b1: vec![0.0; hidden],
            w2,
            b2: vec![0.0; d],
        }
    }

    pub fn zeros(config: &BackboneConfig) -> Self {
        let d = config.embed_dim;
        let hidden = config.mlp_hidden();
        Self {
            norm1: LayerNorm::zeros(d),
            attention: Attention::zeros(config.embed_dim, config.heads),
            norm2: LayerNorm::zeros(d),
            w1: Matrix::zeros(d, hidden),
            b1: vec![0.0; hidden],
            w2: Matrix::zeros(hidden, d),
            b2: vec![0.0; d],
        }
    }

    pub fn zeros_like(&self) -> Self {
        let d = self.w1.rows();
        let hidden = self.w1.cols();
        Self {
            norm1: LayerNorm::zeros(d),
            attention: self.attention.zeros_like(),
            norm2: LayerNorm::zeros(d),
            w1: Matrix::zeros(d, hidden),
            b1: vec![0.0; hidden],
            w2: Matrix::zeros(hidden, d),
            b2: vec![0.0; d],
        }
    }

    pub(crate) fn visit(&self, f: &mut impl FnMut(&[f64])) {
        f(&self.norm1.gamma);
        f(&self.norm1.beta);
        self.attention.visit(f);
        f(&self.norm2.gamma);
        f(&self.norm2.beta);
        f(self.w1.data());
        f(&self.b1);
        f(self.w2.data());
        f(&self.b2);
    }

    pub(crate) fn visit_mut(&mut self, f: &mut impl FnMut(&mut [f64])) {
        f(&mut self.norm1.gamma);
        f(&mut self.norm1.beta);
        self.attention.visit_mut(f);
        f(&mut self.norm2.gamma);
        f(&mut self.norm2.beta);
        f(self.w1.data_mut());
        f(&mut self.b1);
        f(self.w2.data_mut());
        f(&mut self.b2);
    }

    pub fn embed_dim(&self) -> usize {
        self.w1.rows()
    }

    /// MLP(u) = GELU(u·W1 + b1)·W2 + b2, returning (z, g, out).
    fn mlp(&self, u: &Matrix) -> (Matrix, Matrix, Matrix) {
        let mut z = u.matmul(&self.w1);
        z.add_row_broadcast(&self.b1);
        let mut g = z.clone();
        g.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
        let mut out = g.matmul(&self.w2);
        out.add_row_broadcast(&self.b2);
        (z, g, out)
    }
}

/// Activations saved by [`Block::forward_cached`].
#[derive(Debug, Clone)]
pub struct BlockCache {
    prompt_rows: PromptRows,
    norm1: LayerNormCache,
    attention: AttentionCache,
    norm2: LayerNormCache,
    u: Matrix,
    z: Matrix,
    g: Matrix,
}

impl BlockCache {
    pub fn attention(&self) -> &AttentionCache {
        &self.attention
    }
}

#[derive(Debug, Clone, Copy)]
enum PromptRows {
    None,
    Prompt(usize),
    Prefix { keys: usize, values: usize },
}

/// Gradients produced by [`Block::backward`].
pub(crate) struct BlockGrads {
    pub d_input: Matrix,
    pub d_prompt: Option<Matrix>,
}

impl Block {
    /// Forward pass. Under prompt tuning the output has `L` extra leading
    /// rows; under prefix tuning it keeps the input's row count.
    pub fn forward(&self, h: &Matrix, prompt: Option<LayerPrompt<'_>>) -> Result<Matrix> {
        Ok(self.forward_cached(h, prompt)?.0)
    }

    pub fn forward_cached(
        &self,
        h: &Matrix,
        prompt: Option<LayerPrompt<'_>>,
    ) -> Result<(Matrix, BlockCache)> {
        let d = self.embed_dim();
        if h.cols() != d {
            return Err(Error::domain(format!(
                "block input width {} != embed dim {d}",
                h.cols()
            )));
        }
        if h.rows() == 0 {
            return Err(Error::domain("block input has no rows"));
        }
        let (a, norm1) = layer_norm_rows(h, &self.norm1.gamma, &self.norm1.beta);
        let (m, attention, residual, prompt_rows) = match prompt {
            None => {
                let (m, c) = msa_forward(&a, &a, &a, &self.attention);
                (m, c, None, PromptRows::None)
            }
            Some(LayerPrompt::Prompt(p)) => {
                check_width(p, d)?;
                let x = Matrix::vstack(&[p, &a]);
                let (m, c) = msa_forward(&x, &x, &x, &self.attention);
                (
                    m,
                    c,
                    Some(Matrix::vstack(&[p, h])),
                    PromptRows::Prompt(p.rows()),
                )
            }
            Some(prefix @ LayerPrompt::Prefix(p)) => {
                check_width(p, d)?;
                let (pk, pv) = prefix.split_prefix()?;
                let k = Matrix::vstack(&[&pk, &a]);
                let v = Matrix::vstack(&[&pv, &a]);
                let (m, c) = msa_forward(&a, &k, &v, &self.attention);
                (
                    m,
                    c,
                    None,
                    PromptRows::Prefix {
                        keys: pk.rows(),
                        values: pv.rows(),
                    },
                )
            }
        };
        let mut x1 = residual.unwrap_or_else(|| h.clone());
        x1.add_assign(&m);
        let (u, norm2) = layer_norm_rows(&x1, &self.norm2.gamma, &self.norm2.beta);
        let (z, g, y) = self.mlp(&u);
        let mut out = x1;
        out.add_assign(&y);
        let cache = BlockCache {
            prompt_rows,
            norm1,
            attention,
            norm2,
            u,
            z,
            g,
        };
        Ok((out, cache))
    }

    /// Backward pass from `d_out` (same shape as the forward output).
    pub(crate) fn backward(
        &self,
        cache: &BlockCache,
        d_out: &Matrix,
        mut grads: Option<&mut Block>,
    ) -> BlockGrads {
        // MLP branch
        let dg = d_out.matmul_t(&self.w2);
        let mut dz = dg;
        for (dv, &zv) in dz.data_mut().iter_mut().zip(cache.z.data()) {
            *dv *= gelu_grad(zv);
        }
        if let Some(gr) = grads.as_mut() {
            gr.w2.add_assign(&cache.g.t_matmul(d_out));
            add_into(&mut gr.b2, &d_out.column_sums());
            gr.w1.add_assign(&cache.u.t_matmul(&dz));
            add_into(&mut gr.b1, &dz.column_sums());
        }
        let du = dz.matmul_t(&self.w1);
        let ln2_grads = grads
            .as_mut()
            .map(|gr| (&mut gr.norm2.gamma[..], &mut gr.norm2.beta[..]));
        let mut dx1 = layer_norm_rows_backward(&cache.norm2, &self.norm2.gamma, &du, ln2_grads);
        dx1.add_assign(d_out);

        // attention branch
        let inputs = msa_backward(
            &cache.attention,
            &self.attention,
            &dx1,
            grads.as_mut().map(|gr| &mut gr.attention),
        );
        let (da, d_residual, d_prompt) = match cache.prompt_rows {
            PromptRows::None => {
                let mut da = inputs.dq;
                da.add_assign(&inputs.dk);
                da.add_assign(&inputs.dv);
                (da, dx1, None)
            }
            PromptRows::Prompt(l) => {
                let n = dx1.rows();
                let mut dp = dx1.slice_rows(0..l);
                dp.add_assign(&inputs.dq.slice_rows(0..l));
                dp.add_assign(&inputs.dk.slice_rows(0..l));
                dp.add_assign(&inputs.dv.slice_rows(0..l));
                let mut da = inputs.dq.slice_rows(l..n);
                da.add_assign(&inputs.dk.slice_rows(l..n));
                da.add_assign(&inputs.dv.slice_rows(l..n));
                (da, dx1.slice_rows(l..n), Some(dp))
            }
            PromptRows::Prefix { keys, values } => {
                let dpk = inputs.dk.slice_rows(0..keys);
                let dpv = inputs.dv.slice_rows(0..values);
                let mut da = inputs.dq;
                da.add_assign(&inputs.dk.slice_rows(keys..inputs.dk.rows()));
                da.add_assign(&inputs.dv.slice_rows(values..inputs.dv.rows()));
                (da, dx1, Some(Matrix::vstack(&[&dpk, &dpv])))
            }
        };
        let ln1_grads = grads
            .as_mut()
            .map(|gr| (&mut gr.norm1.gamma[..], &mut gr.norm1.beta[..]));
        let mut d_input = layer_norm_rows_backward(&cache.norm1, &self.norm1.gamma, &da, ln1_grads);
        d_input.add_assign(&d_residual);
        BlockGrads { d_input, d_prompt }
    }
}

/// Free-function form of [`Block::forward`].
pub fn block_forward(h: &Matrix, block: &Block, prompt: Option<LayerPrompt<'_>>) -> Result<Matrix> {
    block.forward(h, prompt)
}

fn check_width(p: &Matrix, d: usize) -> Result<()> {
    if p.cols() != d {
        return Err(Error::domain(format!(
            "prompt width {} != embed dim {d}",
            p.cols()
        )));
    }
    Ok(())
}

fn add_into(acc: &mut [f64], v: &[f64]) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> (BackboneConfig, Block, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = BackboneConfig {
            embed_dim: 8,
            heads: 2,
            depth: 1,
            mlp_ratio: 2.0,
            ..Default::default()
        };
        let mut block = Block::init(&cfg, &mut rng);
        block.norm1.gamma.iter_mut().for_each(|g| *g = 1.3);
        block.norm2.beta.iter_mut().for_each(|b| *b = 0.1);
        (cfg, block, rng)
    }

    #[test]
    fn zero_value_and_mlp_weights_make_identity() {
        let (_, mut block, mut rng) = tiny();
        for w in &mut block.attention.wv {
            *w = Matrix::zeros(w.rows(), w.cols());
        }
        block.w2 = Matrix::zeros(block.w2.rows(), block.w2.cols());
        block.b2.iter_mut().for_each(|b| *b = 0.0);
        let h = Matrix::randn(4, 8, 1.0, &mut rng);
        assert_eq!(block.forward(&h, None).unwrap(), h);
    }

    #[test]
    fn backward_matches_central_differences() {
        let (_, block, mut rng) = tiny();
        let h = Matrix::randn(3, 8, 1.0, &mut rng);
        let w = Matrix::randn(3, 8, 1.0, &mut rng);
        let loss = |h: &Matrix| -> f64 {
            let out = block.forward(h, None).unwrap();
            out.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = block.forward_cached(&h, None).unwrap();
        let mut grads = block.zeros_like();
        let g = block.backward(&cache, &w, Some(&mut grads));
        let step = 1e-6;
        for i in 0..h.data().len() {
            let mut hp = h.clone();
            hp.data_mut()[i] += step;
            let mut hm = h.clone();
            hm.data_mut()[i] -= step;
            let fd = (loss(&hp) - loss(&hm)) / (2.0 * step);
            assert!((fd - g.d_input.data()[i]).abs() < 1e-6, "input coord {i}");
        }
        // a sample of parameter coordinates
        let flat = {
            let mut v = Vec::new();
            block.visit(&mut |s: &[f64]| v.extend_from_slice(s));
            v
        };
        let gflat = {
            let mut v = Vec::new();
            grads.visit(&mut |s: &[f64]| v.extend_from_slice(s));
            v
        };
        for i in (0..flat.len()).step_by(7) {
            let perturbed = |delta: f64| {
                let mut b = block.clone();
                let mut at = 0;
                b.visit_mut(&mut |s: &mut [f64]| {
                    if i >= at && i < at + s.len() {
                        s[i - at] += delta;
                    }
                    at += s.len();
                });
                let out = b.forward(&h, None).unwrap();
                out.data().iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>()
            };
            let fd = (perturbed(step) - perturbed(-step)) / (2.0 * step);
            assert!((fd - gflat[i]).abs() < 1e-6, "param coord {i}: {fd} vs {}", gflat[i]);
        }
    }
}
