use crate::error::{Error, Result};
use crate::numeric::ops::{layer_norm_rows, layer_norm_rows_backward, LayerNormCache};
use crate::numeric::Matrix;

use super::block::BlockCache;
use super::BackboneParams;

/// A prompt block handed to one transformer layer.
#[derive(Debug, Clone, Copy)]
pub enum LayerPrompt<'a> {
    /// Prompt tuning: `p` (L×D) is prepended to queries, keys and values.
    Prompt(&'a Matrix),
    /// Prefix tuning: the rows of `p` are split equally into key and value
    /// prefixes.
    Prefix(&'a Matrix),
}

impl<'a> LayerPrompt<'a> {
    pub fn matrix(&self) -> &'a Matrix {
        match self {
            LayerPrompt::Prompt(p) | LayerPrompt::Prefix(p) => p,
        }
    }

    /// Splits a prefix block into `(p_K, p_V)`.
    pub fn split_prefix(&self) -> Result<(Matrix, Matrix)> {
        let p = self.matrix();
        if !p.rows().is_multiple_of(2) {
            return Err(Error::config(format!(
                "prefix block has {} rows; it must split equally into keys and values",
                p.rows()
            )));
        }
        let half = p.rows() / 2;
        Ok((p.slice_rows(0..half), p.slice_rows(half..p.rows())))
    }
}

/// Everything [`BackboneParams::backward`] needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    patches: Matrix,
    blocks: Vec<BlockCache>,
    /// Leading prompt rows dropped after each block (prompt tuning only).
    stripped: Vec<usize>,
    /// Row count of each block output before stripping.
    out_rows: Vec<usize>,
    final_norm: LayerNormCache,
}

impl ForwardCache {
    pub fn block(&self, i: usize) -> &BlockCache {
        &self.blocks[i]
    }
}

/// Per-layer sequence lengths observed during a forward pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ForwardTrace {
    pub layers: Vec<LayerShape>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub input_rows: usize,
    pub output_rows: usize,
    pub prompted: bool,
}

impl BackboneParams {
    /// Flattens the image into patch rows: row-major over the patch grid,
    /// row-major within a patch, channel-minor.
    pub(crate) fn patches(&self, image: &[f64]) -> Result<Matrix> {
        let c = &self.config;
        if image.len() != c.image_len() {
            return Err(Error::domain(format!(
                "image has {} values, expected {}x{}x{}",
                image.len(),
                c.image_height,
                c.image_width,
                c.channels
            )));
        }
        let p = c.patch_size;
        let grid_w = c.image_width / p;
        let mut out = Matrix::zeros(c.num_patches(), c.patch_dim());
        for idx in 0..c.num_patches() {
            let (pr, pc) = (idx / grid_w, idx % grid_w);
            let row = out.row_mut(idx);
            let mut at = 0;
            for r in 0..p {
                let y = pr * p + r;
                for col in 0..p {
                    let x = pc * p + col;
                    let base = (y * c.image_width + x) * c.channels;
                    row[at..at + c.channels].copy_from_slice(&image[base..base + c.channels]);
                    at += c.channels;
                }
            }
        }
        Ok(out)
    }

    /// h′ = Con(cls, θ_ProjE(x_s)) + θ_posE
    pub fn patch_embed(&self, image: &[f64]) -> Result<Matrix> {
        Ok(self.embed_patches(&self.patches(image)?))
    }

    fn embed_patches(&self, patches: &Matrix) -> Matrix {
        let projected = patches.matmul(&self.projection);
        let mut h = Matrix::vstack(&[&self.cls, &projected]);
        h.add_assign(&self.position);
        h
    }

    fn check_prompts(&self, prompts: &[Option<LayerPrompt<'_>>]) -> Result<()> {
        if prompts.len() > self.blocks.len() {
            return Err(Error::domain(format!(
                "{} prompt slots for a depth-{} backbone",
                prompts.len(),
                self.blocks.len()
            )));
        }
        Ok(())
    }

    /// Runs the block stack on an embedded sequence and returns the final
    /// normalized class-token row (1×D).
    pub fn forward_from_embedding(
        &self,
        h0: &Matrix,
        prompts: &[Option<LayerPrompt<'_>>],
    ) -> Result<Matrix> {
        self.check_prompts(prompts)?;
        let mut h = h0.clone();
        for (i, block) in self.blocks.iter().enumerate() {
            let prompt = prompts.get(i).copied().flatten();
            let out = block.forward(&h, prompt)?;
            h = match prompt {
                Some(LayerPrompt::Prompt(p)) => out.slice_rows(p.rows()..out.rows()),
                _ => out,
            };
        }
        let cls = h.slice_rows(0..1);
        Ok(layer_norm_rows(&cls, &self.final_norm.gamma, &self.final_norm.beta).0)
    }

    /// Feature f = θ_FeaE(x) or θ_FeaE(x, p).
    pub fn feature(&self, image: &[f64], prompts: &[Option<LayerPrompt<'_>>]) -> Result<Vec<f64>> {
        let h0 = self.patch_embed(image)?;
        Ok(self.forward_from_embedding(&h0, prompts)?.into_data())
    }

    pub fn forward_cached(
        &self,
        image: &[f64],
        prompts: &[Option<LayerPrompt<'_>>],
    ) -> Result<(Vec<f64>, ForwardCache)> {
        self.check_prompts(prompts)?;
        let patches = self.patches(image)?;
        let mut h = self.embed_patches(&patches);
        let mut blocks = Vec::with_capacity(self.blocks.len());
        let mut stripped = Vec::with_capacity(self.blocks.len());
        let mut out_rows = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter().enumerate() {
            let prompt = prompts.get(i).copied().flatten();
            let (out, cache) = block.forward_cached(&h, prompt)?;
            blocks.push(cache);
            out_rows.push(out.rows());
            let strip = match prompt {
                Some(LayerPrompt::Prompt(p)) => p.rows(),
                _ => 0,
            };
            stripped.push(strip);
            h = if strip > 0 {
                out.slice_rows(strip..out.rows())
            } else {
                out
            };
        }
        let cls = h.slice_rows(0..1);
        let (f, final_norm) = layer_norm_rows(&cls, &self.final_norm.gamma, &self.final_norm.beta);
        let cache = ForwardCache {
            patches,
            blocks,
            stripped,
            out_rows,
            final_norm,
        };
        Ok((f.into_data(), cache))
    }

    /// Backpropagates `d_feature` (length D) through the cached pass.
    ///
    /// Returns the gradient for each prompt slot that was used (`None` for
    /// unprompted layers). Backbone parameter gradients are accumulated into
    /// `grads` when given.
    pub(crate) fn backward(
        &self,
        cache: &ForwardCache,
        d_feature: &[f64],
        mut grads: Option<&mut BackboneParams>,
    ) -> Vec<Option<Matrix>> {
        let d = self.config.embed_dim;
        let dcls_out = Matrix::row_vector(d_feature);
        let dcls = layer_norm_rows_backward(
            &cache.final_norm,
            &self.final_norm.gamma,
            &dcls_out,
            grads
                .as_mut()
                .map(|g| (&mut g.final_norm.gamma[..], &mut g.final_norm.beta[..])),
        );
        let depth = self.blocks.len();
        let last_rows = if depth == 0 {
            self.config.seq_len()
        } else {
            cache.out_rows[depth - 1] - cache.stripped[depth - 1]
        };
        let mut dh = Matrix::zeros(last_rows, d);
        dh.row_mut(0).copy_from_slice(dcls.row(0));

        let mut prompt_grads = vec![None; depth];
        for i in (0..depth).rev() {
            let d_out = if cache.stripped[i] > 0 {
                Matrix::vstack(&[&Matrix::zeros(cache.stripped[i], d), &dh])
            } else {
                dh
            };
            let block_grads = grads.as_mut().map(|g| &mut g.blocks[i]);
            let out = self.blocks[i].backward(&cache.blocks[i], &d_out, block_grads);
            prompt_grads[i] = out.d_prompt;
            dh = out.d_input;
        }
        if let Some(g) = grads.as_mut() {
            g.position.add_assign(&dh);
            for (a, b) in g.cls.data_mut().iter_mut().zip(dh.row(0)) {
                *a += b;
            }
            let d_proj = cache.patches.t_matmul(&dh.slice_rows(1..dh.rows()));
            g.projection.add_assign(&d_proj);
        }
        prompt_grads
    }

    /// Records the sequence length entering and leaving every layer.
    pub fn trace(&self, image: &[f64], prompts: &[Option<LayerPrompt<'_>>]) -> Result<ForwardTrace> {
        self.check_prompts(prompts)?;
        let mut h = self.patch_embed(image)?;
        let mut layers = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter().enumerate() {
            let prompt = prompts.get(i).copied().flatten();
            let out = block.forward(&h, prompt)?;
            layers.push(LayerShape {
                input_rows: h.rows(),
                output_rows: out.rows(),
                prompted: prompt.is_some(),
            });
            h = match prompt {
                Some(LayerPrompt::Prompt(p)) => out.slice_rows(p.rows()..out.rows()),
                _ => out,
            };
        }
        Ok(ForwardTrace { layers })
    }
}

/// Free-function form of [`BackboneParams::patch_embed`].
pub fn patch_embed(image: &[f64], params: &BackboneParams) -> Result<Matrix> {
    params.patch_embed(image)
}

/// Final-layer class-token feature, optionally under per-layer prompts.
pub fn extract_feature(
    image: &[f64],
    params: &BackboneParams,
    prompts: &[Option<LayerPrompt<'_>>],
) -> Result<Vec<f64>> {
    params.feature(image, prompts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(cfg: BackboneConfig, seed: u64) -> BackboneParams {
        BackboneParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn zero_image_and_projection_give_cls_plus_position() {
        let mut p = params(BackboneConfig::default(), 1);
        p.projection = Matrix::zeros(p.projection.rows(), p.projection.cols());
        let h = p.patch_embed(&vec![0.0; 784]).unwrap();
        let want = Matrix::vstack(&[&p.cls, &Matrix::zeros(16, 64)]).add(&p.position);
        assert_eq!(h, want);
        assert_eq!(h.rows(), 17);
    }

    #[test]
    fn one_hot_patch_selects_projection_row() {
        // 2x2 image, 1x1 patches, D = 2: the patch for pixel (1,0) is index 2
        let cfg = BackboneConfig {
            image_height: 2,
            image_width: 2,
            channels: 1,
            patch_size: 1,
            embed_dim: 2,
            heads: 1,
            depth: 0,
            mlp_ratio: 1.0,
        };
        let mut p = params(cfg, 2);
        p.projection = Matrix::from_rows(&[vec![3.0, -1.0]]).unwrap();
        let h = p.patch_embed(&[0.0, 0.0, 1.0, 0.0]).unwrap();
        for c in 0..2 {
            assert_eq!(h.get(3, c), p.projection.get(0, c) + p.position.get(3, c));
            assert_eq!(h.get(1, c), p.position.get(1, c));
        }
    }

    #[test]
    fn patch_order_is_grid_then_pixels_then_channels() {
        let cfg = BackboneConfig {
            image_height: 4,
            image_width: 4,
            channels: 2,
            patch_size: 2,
            embed_dim: 2,
            heads: 1,
            depth: 0,
            mlp_ratio: 1.0,
        };
        let p = params(cfg, 3);
        let image: Vec<f64> = (0..32).map(|v| v as f64).collect();
        let patches = p.patches(&image).unwrap();
        // patch 1 = grid (0,1): pixels (0,2),(0,3),(1,2),(1,3), channels minor
        let want = [4.0, 5.0, 6.0, 7.0, 12.0, 13.0, 14.0, 15.0];
        assert_eq!(patches.row(1), &want);
    }

    #[test]
    fn wrong_image_size_is_domain_error() {
        let p = params(BackboneConfig::default(), 1);
        assert!(matches!(p.patch_embed(&[0.0; 10]), Err(Error::Domain(_))));
    }

    #[test]
    fn depth_zero_returns_normalized_class_token() {
        let cfg = BackboneConfig {
            depth: 0,
            ..Default::default()
        };
        let p = params(cfg, 4);
        let img = vec![0.5; 784];
        let h0 = p.patch_embed(&img).unwrap();
        let want = layer_norm_rows(&h0.slice_rows(0..1), &p.final_norm.gamma, &p.final_norm.beta).0;
        assert_eq!(p.feature(&img, &[]).unwrap(), want.into_data());
    }

    #[test]
    fn odd_prefix_block_is_rejected() {
        let p = Matrix::zeros(3, 4);
        assert!(matches!(
            LayerPrompt::Prefix(&p).split_prefix(),
            Err(Error::Config(_))
        ));
    }
}
