//! Miniature vision transformer: patch embedding, per-head attention,
//! pre-norm blocks, and the frozen-parameter contract.

mod attention;
mod block;
pub mod checkpoint;
mod model;
mod pretrain;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numeric::Matrix;

pub use attention::{attention_heads, msa, Attention, AttentionCache};
pub use block::{block_forward, Block, BlockCache};
pub use model::{extract_feature, patch_embed, ForwardCache, ForwardTrace, LayerPrompt};
pub use pretrain::{pretrain_and_freeze, PretrainConfig, PretrainReport};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub depth: usize,
    pub mlp_ratio: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            image_height: 28,
            image_width: 28,
            channels: 1,
            patch_size: 7,
            embed_dim: 64,
            heads: 4,
            depth: 6,
            mlp_ratio: 4.0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("image_height", self.image_height),
            ("image_width", self.image_width),
            ("channels", self.channels),
            ("patch_size", self.patch_size),
            ("embed_dim", self.embed_dim),
            ("heads", self.heads),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if !self.image_height.is_multiple_of(self.patch_size) || !self.image_width.is_multiple_of(self.patch_size) {
            return Err(Error::config(format!(
                "image {}x{} is not divisible into {}x{} patches",
                self.image_height, self.image_width, self.patch_size, self.patch_size
            )));
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "embed_dim {} is not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        if !(self.mlp_ratio > 0.0 && self.mlp_ratio.is_finite()) || self.mlp_hidden() == 0 {
            return Err(Error::config("mlp_ratio must be positive"));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        (self.image_height / self.patch_size) * (self.image_width / self.patch_size)
    }

    /// Patches plus the class token.
    pub fn seq_len(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn image_len(&self) -> usize {
        self.image_height * self.image_width * self.channels
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }
}

/// Per-row affine parameters of a layer norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
        }
    }

    fn zeros(dim: usize) -> Self {
        Self {
            gamma: vec![0.0; dim],
            beta: vec![0.0; dim],
        }
    }
}

/// All transformer parameters. Once `frozen` is set, nothing in this crate
/// mutates them; [`BackboneParams::checksum`] is how callers verify that.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneParams {
    pub config: BackboneConfig,
    /// (P·P·C) × D
    pub projection: Matrix,
    /// 1 × D
    pub cls: Matrix,
    /// N × D
    pub position: Matrix,
    pub blocks: Vec<Block>,
    pub final_norm: LayerNorm,
    frozen: bool,
}

impl BackboneParams {
    /// Random initialization. Not frozen.
    pub fn init(config: BackboneConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let projection = Matrix::randn(
            config.patch_dim(),
            d,
            1.0 / (config.patch_dim() as f64).sqrt(),
            rng,
        );
        let cls = Matrix::randn(1, d, 0.02, rng);
        let position = Matrix::randn(config.seq_len(), d, 0.02, rng);
        let blocks = (0..config.depth)
            .map(|_| Block::init(&config, rng))
            .collect();
        Ok(Self {
            config,
            projection,
            cls,
            position,
            blocks,
            final_norm: LayerNorm::new(d),
            frozen: false,
        })
    }

    /// Every entry zero (layer-norm scales included). Not frozen.
    pub fn zeros(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        Ok(Self {
            config,
            projection: Matrix::zeros(config.patch_dim(), d),
            cls: Matrix::zeros(1, d),
            position: Matrix::zeros(config.seq_len(), d),
            blocks: (0..config.depth).map(|_| Block::zeros(&config)).collect(),
            final_norm: LayerNorm::zeros(d),
            frozen: false,
        })
    }

    /// Same shapes, every entry zero. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.config).expect("config was validated at construction")
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub(crate) fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    pub fn ensure_frozen(&self) -> Result<()> {
        if self.frozen {
            Ok(())
        } else {
            Err(Error::contract("backbone must be frozen before task training"))
        }
    }

    /// Visits every parameter buffer in the fixed serialization order:
    /// projection, cls, position, then per block (ln1 γ, ln1 β, θ_Q per head,
    /// θ_K per head, θ_V per head, θ_O, ln2 γ, ln2 β, W1, b1, W2, b2), then
    /// final-norm γ, β.
    pub fn visit(&self, mut f: impl FnMut(&[f64])) {
        f(self.projection.data());
        f(self.cls.data());
        f(self.position.data());
        for b in &self.blocks {
            b.visit(&mut f);
        }
        f(&self.final_norm.gamma);
        f(&self.final_norm.beta);
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(&mut [f64])) {
        f(self.projection.data_mut());
        f(self.cls.data_mut());
        f(self.position.data_mut());
        for b in &mut self.blocks {
            b.visit_mut(&mut f);
        }
        f(&mut self.final_norm.gamma);
        f(&mut self.final_norm.beta);
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(|s| n += s.len());
        n
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit(|s| out.extend_from_slice(s));
        out
    }

    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::domain(format!(
                "flat buffer has {} values, backbone has {}",
                flat.len(),
                self.num_params()
            )));
        }
        let mut at = 0;
        self.visit_mut(|s| {
            s.copy_from_slice(&flat[at..at + s.len()]);
            at += s.len();
        });
        Ok(())
    }

    /// 64-bit content checksum (leading bytes of SHA-256 over the
    /// little-endian parameter stream).
    pub fn checksum(&self) -> u64 {
        let mut hasher = Sha256::new();
        self.visit(|s| {
            for v in s {
                hasher.update(v.to_le_bytes());
            }
        });
        digest_to_u64(&hasher.finalize())
    }
}

pub(crate) fn digest_to_u64(digest: &[u8]) -> u64 {
    let mut b = [0u8; 8];
    b.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(b)
}

/// Checksum of an arbitrary sequence of f64 buffers, same scheme as
/// [`BackboneParams::checksum`].
pub fn checksum_of<'a>(buffers: impl IntoIterator<Item = &'a [f64]>) -> u64 {
    let mut hasher = Sha256::new();
    for s in buffers {
        for v in s {
            hasher.update(v.to_le_bytes());
        }
    }
    digest_to_u64(&hasher.finalize())
}
