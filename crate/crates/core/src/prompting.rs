//! Task prompt pool and the two ways a prompt enters attention.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{checksum_of, msa, Attention, BackboneParams, ForwardCache, LayerPrompt};
use crate::error::{Error, Result};
use crate::numeric::Matrix;

pub const PROMPT_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptMode {
    /// Rows prepended to queries, keys and values; the sequence grows by L.
    Prompt,
    /// Rows prepended to keys and values only; the sequence length is kept.
    Prefix,
}

impl PromptMode {
    /// Stored rows per layer for a prompt of length `length`. A prefix block
    /// holds `length` key rows followed by `length` value rows.
    pub fn rows_per_layer(self, length: usize) -> usize {
        match self {
            PromptMode::Prompt => length,
            PromptMode::Prefix => 2 * length,
        }
    }
}

/// Default prompted layers: the leading ⌈5·depth/12⌉ layers, i.e. five of
/// twelve on a ViT-B sized stack.
pub fn default_prompted_layers(depth: usize) -> Vec<usize> {
    let n = (5 * depth).div_ceil(12).min(depth);
    (0..n).collect()
}

/// One task's prompt: a block per prompted layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    task: usize,
    blocks: Vec<Matrix>,
}

impl Prompt {
    /// 0-based task index this prompt belongs to.
    pub fn task(&self) -> usize {
        self.task
    }

    pub fn blocks(&self) -> &[Matrix] {
        &self.blocks
    }

    /// Completed prompts inside a pool stay read-only: the pool only hands
    /// out `&mut Prompt` for the task in training.
    pub fn blocks_mut(&mut self) -> &mut [Matrix] {
        &mut self.blocks
    }

    pub fn num_params(&self) -> usize {
        self.blocks.iter().map(|b| b.data().len()).sum()
    }

    pub fn checksum(&self) -> u64 {
        checksum_of(self.blocks.iter().map(|b| b.data()))
    }

    pub(crate) fn from_blocks(task: usize, blocks: Vec<Matrix>) -> Self {
        Self { task, blocks }
    }
}

/// Ordered per-task prompts sharing one mode, length and layer set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptPool {
    mode: PromptMode,
    length: usize,
    layers: Vec<usize>,
    embed_dim: usize,
    depth: usize,
    prompts: Vec<Prompt>,
    /// Prompts `0..completed` are read-only.
    completed: usize,
}

impl PromptPool {
    pub fn new(
        mode: PromptMode,
        length: usize,
        layers: Vec<usize>,
        embed_dim: usize,
        depth: usize,
    ) -> Result<Self> {
        if length == 0 {
            return Err(Error::config("prompt length must be positive"));
        }
        if embed_dim == 0 {
            return Err(Error::config("embed_dim must be positive"));
        }
        if layers.is_empty() {
            return Err(Error::config("at least one prompted layer is required"));
        }
        if layers.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("prompted layers must be strictly increasing"));
        }
        if let Some(&last) = layers.last() {
            if last >= depth {
                return Err(Error::config(format!(
                    "prompted layer {last} is outside a depth-{depth} backbone"
                )));
            }
        }
        Ok(Self {
            mode,
            length,
            layers,
            embed_dim,
            depth,
            prompts: Vec::new(),
            completed: 0,
        })
    }

    pub fn mode(&self) -> PromptMode {
        self.mode
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn layers(&self) -> &[usize] {
        &self.layers
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn completed(&self) -> usize {
        self.completed
    }

    pub fn get(&self, task: usize) -> Option<&Prompt> {
        self.prompts.get(task)
    }

    pub fn prompts(&self) -> &[Prompt] {
        &self.prompts
    }

    /// Appends a fresh N(0, 0.02²) prompt. `task_id` is 1-based and must be
    /// exactly one past the current pool size.
    pub fn alloc_task_prompt(&mut self, task_id: usize, seed: u64) -> Result<&Prompt> {
        if task_id != self.prompts.len() + 1 {
            return Err(Error::domain(format!(
                "task id {task_id} allocated into a pool of {} prompts",
                self.prompts.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = self.mode.rows_per_layer(self.length);
        let blocks = self
            .layers
            .iter()
            .map(|_| Matrix::randn(rows, self.embed_dim, PROMPT_INIT_STD, &mut rng))
            .collect();
        self.prompts.push(Prompt::from_blocks(task_id - 1, blocks));
        Ok(self.prompts.last().expect("just pushed"))
    }

    /// Mutable access for training. Completed prompts are refused.
    pub fn prompt_mut(&mut self, task: usize) -> Result<&mut Prompt> {
        if task < self.completed {
            return Err(Error::contract(format!(
                "prompt of completed task {task} is immutable"
            )));
        }
        let n = self.prompts.len();
        self.prompts
            .get_mut(task)
            .ok_or_else(|| Error::domain(format!("no prompt for task {task} (pool size {n})")))
    }

    /// Marks every allocated prompt as completed.
    pub fn complete_all(&mut self) {
        self.completed = self.prompts.len();
    }

    pub(crate) fn push_restored(&mut self, prompt: Prompt, completed: bool) -> Result<()> {
        let rows = self.mode.rows_per_layer(self.length);
        let ok = prompt.task == self.prompts.len()
            && prompt.blocks.len() == self.layers.len()
            && prompt
                .blocks
                .iter()
                .all(|b| b.shape() == (rows, self.embed_dim));
        if !ok {
            return Err(Error::domain("restored prompt does not match the pool layout"));
        }
        self.prompts.push(prompt);
        if completed {
            self.completed = self.prompts.len();
        }
        Ok(())
    }

    /// Stored prompt parameters over all tasks.
    pub fn num_params(&self) -> usize {
        self.prompts.iter().map(Prompt::num_params).sum()
    }

    /// Per-layer prompt slots for the backbone (`None` on plain layers).
    pub fn layer_prompts<'a>(&self, prompt: &'a Prompt) -> Vec<Option<LayerPrompt<'a>>> {
        let mut slots = vec![None; self.depth];
        for (&layer, block) in self.layers.iter().zip(&prompt.blocks) {
            slots[layer] = Some(match self.mode {
                PromptMode::Prompt => LayerPrompt::Prompt(block),
                PromptMode::Prefix => LayerPrompt::Prefix(block),
            });
        }
        slots
    }
}

/// h^pro = MSA(Con(p, h_Q), Con(p, h_K), Con(p, h_V)); L extra leading rows.
pub fn prompt_tuning_msa(
    h_q: &Matrix,
    h_k: &Matrix,
    h_v: &Matrix,
    p: &Matrix,
    attn: &Attention,
) -> Result<Matrix> {
    for (name, m) in [("h_q", h_q), ("h_k", h_k), ("h_v", h_v)] {
        if m.cols() != p.cols() {
            return Err(Error::domain(format!(
                "prompt width {} != {name} width {}",
                p.cols(),
                m.cols()
            )));
        }
    }
    msa(
        &Matrix::vstack(&[p, h_q]),
        &Matrix::vstack(&[p, h_k]),
        &Matrix::vstack(&[p, h_v]),
        attn,
    )
}

/// h^pre = MSA(h_Q, Con(p_K, h_K), Con(p_V, h_V)) with `p` split equally
/// into `p_K` (top half) and `p_V`. Odd row counts are a config error.
pub fn prefix_tuning_msa(
    h_q: &Matrix,
    h_k: &Matrix,
    h_v: &Matrix,
    p: &Matrix,
    attn: &Attention,
) -> Result<Matrix> {
    if p.cols() != h_k.cols() || p.cols() != h_v.cols() {
        return Err(Error::domain(format!(
            "prefix width {} does not match key/value width {}",
            p.cols(),
            h_k.cols()
        )));
    }
    let (pk, pv) = LayerPrompt::Prefix(p).split_prefix()?;
    msa(
        h_q,
        &Matrix::vstack(&[&pk, h_k]),
        &Matrix::vstack(&[&pv, h_v]),
        attn,
    )
}

/// θ_FeaE(x, p), or θ_FeaE(x) when `prompt` is `None`.
pub fn forward_with_prompt(
    image: &[f64],
    backbone: &BackboneParams,
    pool: &PromptPool,
    prompt: Option<&Prompt>,
) -> Result<Vec<f64>> {
    check_pool(backbone, pool)?;
    match prompt {
        None => backbone.feature(image, &[]),
        Some(p) => backbone.feature(image, &pool.layer_prompts(p)),
    }
}

/// Forward pass that keeps what [`prompt_backward`] needs.
pub fn forward_with_prompt_cached(
    image: &[f64],
    backbone: &BackboneParams,
    pool: &PromptPool,
    prompt: &Prompt,
) -> Result<(Vec<f64>, ForwardCache)> {
    check_pool(backbone, pool)?;
    backbone.forward_cached(image, &pool.layer_prompts(prompt))
}

/// Gradient of the feature-space upstream `d_feature` with respect to each
/// prompted layer's block, in `pool.layers()` order.
pub fn prompt_backward(
    backbone: &BackboneParams,
    pool: &PromptPool,
    cache: &ForwardCache,
    d_feature: &[f64],
) -> Vec<Matrix> {
    let mut grads = backbone.backward(cache, d_feature, None);
    let rows = pool.mode.rows_per_layer(pool.length);
    pool.layers
        .iter()
        .map(|&l| {
            grads[l]
                .take()
                .unwrap_or_else(|| Matrix::zeros(rows, pool.embed_dim))
        })
        .collect()
}

fn check_pool(backbone: &BackboneParams, pool: &PromptPool) -> Result<()> {
    let c = &backbone.config;
    if pool.depth != c.depth || pool.embed_dim != c.embed_dim {
        return Err(Error::domain(format!(
            "pool built for depth {} / width {}, backbone is depth {} / width {}",
            pool.depth, pool.embed_dim, c.depth, c.embed_dim
        )));
    }
    Ok(())
}
