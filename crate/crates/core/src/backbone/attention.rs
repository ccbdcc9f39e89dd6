use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::ops::{softmax_in_place, softmax_rows_backward};
use crate::numeric::Matrix;

use super::BackboneConfig;

/// Multi-head self-attention parameters.
///
/// The query/key/value inputs are split column-wise into `heads` segments of
/// width D/m and each segment is projected by its own (D/m)×(D/m) matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attention {
    pub heads: usize,
    pub wq: Vec<Matrix>,
    pub wk: Vec<Matrix>,
    pub wv: Vec<Matrix>,
    /// D × D output projection θ_O.
    pub wo: Matrix,
}

impl Attention {
    pub fn init(config: &BackboneConfig, rng: &mut impl Rng) -> Self {
        let dh = config.head_dim();
        let d = config.embed_dim;
        let head_std = 1.0 / (dh as f64).sqrt();
        let mk = |rng: &mut _| -> Vec<Matrix> {
            (0..config.heads)
                .map(|_| Matrix::randn(dh, dh, head_std, rng))
                .collect()
        };
        let wq = mk(rng);
        let wk = mk(rng);
        let wv = mk(rng);
        let wo = Matrix::randn(d, d, 1.0 / (d as f64).sqrt(), rng);
        Self {
            heads: config.heads,
            wq,
            wk,
            wv,
            wo,
        }
    }

    /// Identity per-head projections and identity θ_O.
    pub fn identity(embed_dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !embed_dim.is_multiple_of(heads) {
            return Err(Error::config(format!(
                "embed_dim {embed_dim} is not divisible by {heads} heads"
            )));
        }
        let dh = embed_dim / heads;
        let eye = || (0..heads).map(|_| Matrix::identity(dh)).collect::<Vec<_>>();
        Ok(Self {
            heads,
            wq: eye(),
            wk: eye(),
            wv: eye(),
            wo: Matrix::identity(embed_dim),
        })
    }

    pub fn zeros(embed_dim: usize, heads: usize) -> Self {
        let dh = embed_dim / heads;
        let z = || (0..heads).map(|_| Matrix::zeros(dh, dh)).collect::<Vec<_>>();
        Self {
            heads,
            wq: z(),
            wk: z(),
            wv: z(),
            wo: Matrix::zeros(embed_dim, embed_dim),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let z = |v: &Vec<Matrix>| v.iter().map(|m| Matrix::zeros(m.rows(), m.cols())).collect();
        Self {
            heads: self.heads,
            wq: z(&self.wq),
            wk: z(&self.wk),
            wv: z(&self.wv),
            wo: Matrix::zeros(self.wo.rows(), self.wo.cols()),
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.wo.rows()
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim() / self.heads
    }

    pub(crate) fn visit(&self, f: &mut impl FnMut(&[f64])) {
        for m in self.wq.iter().chain(&self.wk).chain(&self.wv) {
            f(m.data());
        }
        f(self.wo.data());
    }

    pub(crate) fn visit_mut(&mut self, f: &mut impl FnMut(&mut [f64])) {
        for m in self
            .wq
            .iter_mut()
            .chain(self.wk.iter_mut())
            .chain(self.wv.iter_mut())
        {
            f(m.data_mut());
        }
        f(self.wo.data_mut());
    }

    fn check_inputs(&self, q_in: &Matrix, k_in: &Matrix, v_in: &Matrix) -> Result<()> {
        let d = self.embed_dim();
        if q_in.cols() != d || k_in.cols() != d || v_in.cols() != d {
            return Err(Error::domain(format!(
                "attention inputs must have width {d}, got {}/{}/{}",
                q_in.cols(),
                k_in.cols(),
                v_in.cols()
            )));
        }
        if k_in.rows() != v_in.rows() {
            return Err(Error::domain(format!(
                "key rows {} != value rows {}",
                k_in.rows(),
                v_in.rows()
            )));
        }
        if k_in.rows() == 0 || q_in.rows() == 0 {
            return Err(Error::domain("attention over an empty sequence"));
        }
        Ok(())
    }
}

/// Saved activations for [`Attention`] backward.
#[derive(Debug, Clone)]
pub struct AttentionCache {
    q_in: Matrix,
    k_in: Matrix,
    v_in: Matrix,
    q: Vec<Matrix>,
    k: Vec<Matrix>,
    v: Vec<Matrix>,
    /// Attention weights per head, rows(q) × rows(k).
    a: Vec<Matrix>,
    concat: Matrix,
}

impl AttentionCache {
    pub fn weights(&self) -> &[Matrix] {
        &self.a
    }
}

/// Gradients with respect to the three attention inputs.
pub(crate) struct AttentionInputGrads {
    pub dq: Matrix,
    pub dk: Matrix,
    pub dv: Matrix,
}

/// Per-head outputs h″_i = softmax(Q_i K_iᵀ / √(D/m)) V_i.
pub fn attention_heads(
    q_in: &Matrix,
    k_in: &Matrix,
    v_in: &Matrix,
    attn: &Attention,
) -> Result<Vec<Matrix>> {
    attn.check_inputs(q_in, k_in, v_in)?;
    let (heads, _) = heads_forward(q_in, k_in, v_in, attn);
    Ok(heads)
}

/// MSA(h_Q, h_K, h_V) = Con(h″_1, …, h″_m) · θ_O.
pub fn msa(q_in: &Matrix, k_in: &Matrix, v_in: &Matrix, attn: &Attention) -> Result<Matrix> {
    attn.check_inputs(q_in, k_in, v_in)?;
    Ok(msa_forward(q_in, k_in, v_in, attn).0)
}

type HeadParts = (Vec<Matrix>, Vec<Matrix>, Vec<Matrix>, Vec<Matrix>);

fn heads_forward(
    q_in: &Matrix,
    k_in: &Matrix,
    v_in: &Matrix,
    attn: &Attention,
) -> (Vec<Matrix>, HeadParts) {
    let dh = attn.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(attn.heads);
    let (mut qs, mut ks, mut vs, mut ws) = (vec![], vec![], vec![], vec![]);
    for h in 0..attn.heads {
        let seg = h * dh..(h + 1) * dh;
        let q = q_in.slice_cols(seg.clone()).matmul(&attn.wq[h]);
        let k = k_in.slice_cols(seg.clone()).matmul(&attn.wk[h]);
        let v = v_in.slice_cols(seg).matmul(&attn.wv[h]);
        let mut s = q.matmul_t(&k);
        s.scale(scale);
        for r in 0..s.rows() {
            softmax_in_place(s.row_mut(r));
        }
        outs.push(s.matmul(&v));
        qs.push(q);
        ks.push(k);
        vs.push(v);
        ws.push(s);
    }
    (outs, (qs, ks, vs, ws))
}

pub(crate) fn msa_forward(
    q_in: &Matrix,
    k_in: &Matrix,
    v_in: &Matrix,
    attn: &Attention,
) -> (Matrix, AttentionCache) {
    let (heads, (q, k, v, a)) = heads_forward(q_in, k_in, v_in, attn);
    let refs: Vec<&Matrix> = heads.iter().collect();
    let concat = Matrix::hstack(&refs);
    let out = concat.matmul(&attn.wo);
    let cache = AttentionCache {
        q_in: q_in.clone(),
        k_in: k_in.clone(),
        v_in: v_in.clone(),
        q,
        k,
        v,
        a,
        concat,
    };
    (out, cache)
}

/// Backward through MSA. Parameter gradients are accumulated into `grads`
/// when given.
pub(crate) fn msa_backward(
    cache: &AttentionCache,
    attn: &Attention,
    d_out: &Matrix,
    mut grads: Option<&mut Attention>,
) -> AttentionInputGrads {
    let dh = attn.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let d_concat = d_out.matmul_t(&attn.wo);
    if let Some(g) = grads.as_mut() {
        g.wo.add_assign(&cache.concat.t_matmul(d_out));
    }
    let mut dq_in = Matrix::zeros(cache.q_in.rows(), cache.q_in.cols());
    let mut dk_in = Matrix::zeros(cache.k_in.rows(), cache.k_in.cols());
    let mut dv_in = Matrix::zeros(cache.v_in.rows(), cache.v_in.cols());
    for h in 0..attn.heads {
        let seg = h * dh..(h + 1) * dh;
        let d_head = d_concat.slice_cols(seg.clone());
        let a = &cache.a[h];
        let da = d_head.matmul_t(&cache.v[h]);
        let dv = a.t_matmul(&d_head);
        let mut ds = softmax_rows_backward(a, &da);
        ds.scale(scale);
        let dq = ds.matmul(&cache.k[h]);
        let dk = ds.t_matmul(&cache.q[h]);

        dq_in.add_cols(seg.start, &dq.matmul_t(&attn.wq[h]));
        dk_in.add_cols(seg.start, &dk.matmul_t(&attn.wk[h]));
        dv_in.add_cols(seg.start, &dv.matmul_t(&attn.wv[h]));
        if let Some(g) = grads.as_mut() {
            g.wq[h].add_assign(&cache.q_in.slice_cols(seg.clone()).t_matmul(&dq));
            g.wk[h].add_assign(&cache.k_in.slice_cols(seg.clone()).t_matmul(&dk));
            g.wv[h].add_assign(&cache.v_in.slice_cols(seg).t_matmul(&dv));
        }
    }
    AttentionInputGrads {
        dq: dq_in,
        dk: dk_in,
        dv: dv_in,
    }
}
