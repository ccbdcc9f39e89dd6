//! Two-stage prediction: a prompt classifier on prompt-free features picks
//! the task prompt, then a label classifier on prompted features picks the
//! class.

mod learner;
mod state;

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::BackboneParams;
use crate::error::{Error, Result};
use crate::head::{LinearHead, HEAD_INIT_STD};
use crate::numeric::ops::{argmax, softmax_cross_entropy};
use crate::numeric::Matrix;
use crate::prompting::{forward_with_prompt_cached, prompt_backward, Prompt, PromptPool};

pub(crate) use learner::{group_by_class, train_head, STREAM_LABEL_STAGE};
pub use state::{decode_state, encode_state, load_state, save_state, STATE_MAGIC, STATE_VERSION};
pub use learner::{
    seed_for, train_label_stage, train_prompt_stage, AblationFlags, LabelStageConfig,
    LabelStageOutput, LabelTranslation, LearnerConfig, PrePrompt, Selection, StageConfig,
    StageReport, TaskKeys,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayoutRegime {
    /// Every task has |Y_1| classes.
    Equal,
    /// A larger or smaller first task, then equal increments.
    UnequalFirst,
}

/// Per-task class counts. Global class ids are contiguous in task order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskLayout {
    sizes: Vec<usize>,
}

impl TaskLayout {
    pub fn new(sizes: Vec<usize>) -> Result<Self> {
        let mut layout = Self::default();
        for s in sizes {
            layout.push(s)?;
        }
        Ok(layout)
    }

    /// Appends a task. Only the equal and unequal-first regimes are
    /// accepted, since the task index is recovered by floor arithmetic.
    pub fn push(&mut self, size: usize) -> Result<()> {
        if size == 0 {
            return Err(Error::domain("a task must contain at least one class"));
        }
        if self.sizes.len() >= 2 && size != self.sizes[1] {
            return Err(Error::domain(format!(
                "task of {size} classes breaks the increment of {}",
                self.sizes[1]
            )));
        }
        self.sizes.push(size);
        Ok(())
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn num_tasks(&self) -> usize {
        self.sizes.len()
    }

    pub fn num_classes(&self) -> usize {
        self.sizes.iter().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.sizes.is_empty()
    }

    pub fn regime(&self) -> LayoutRegime {
        match self.sizes.split_first() {
            Some((first, rest)) if rest.iter().any(|s| s != first) => LayoutRegime::UnequalFirst,
            _ => LayoutRegime::Equal,
        }
    }

    /// First global class id of `task`.
    pub fn offset(&self, task: usize) -> usize {
        self.sizes[..task].iter().sum()
    }

    pub fn classes_of(&self, task: usize) -> Range<usize> {
        let start = self.offset(task);
        start..start + self.sizes[task]
    }

    /// Linear scan over the layout.
    pub fn task_of_class(&self, class: usize) -> Option<usize> {
        let mut end = 0;
        for (t, s) in self.sizes.iter().enumerate() {
            end += s;
            if class < end {
                return Some(t);
            }
        }
        None
    }

    /// Fine-to-coarse index: ⌊c/|Y_1|⌋ for equal tasks, otherwise 0 below
    /// |Y_1| and ⌊(c−|Y_1|)/|Y_2|⌋ + 1 above.
    pub fn task_index(&self, class: usize) -> Result<usize> {
        if self.sizes.is_empty() {
            return Err(Error::contract("no task has been learned"));
        }
        if class >= self.num_classes() {
            return Err(Error::domain(format!(
                "class {class} outside {} learned classes",
                self.num_classes()
            )));
        }
        let first = self.sizes[0];
        Ok(match self.regime() {
            LayoutRegime::Equal => class / first,
            LayoutRegime::UnequalFirst if class < first => 0,
            LayoutRegime::UnequalFirst => (class - first) / self.sizes[1] + 1,
        })
    }
}

/// θ_ClaP plus the class → task map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptClassifier {
    pub head: LinearHead,
    class_task: Vec<usize>,
}

impl PromptClassifier {
    pub fn new(dim: usize) -> Self {
        Self {
            head: LinearHead::new(dim),
            class_task: Vec::new(),
        }
    }

    pub(crate) fn from_parts(head: LinearHead, class_task: Vec<usize>) -> Result<Self> {
        if head.classes() != class_task.len() {
            return Err(Error::domain("class-to-task map does not cover the head"));
        }
        Ok(Self { head, class_task })
    }

    pub fn extend(&mut self, task: usize, classes: usize, rng: &mut impl Rng) {
        self.head.extend(classes, HEAD_INIT_STD, rng);
        self.class_task.extend(std::iter::repeat_n(task, classes));
    }

    pub fn classes(&self) -> usize {
        self.head.classes()
    }

    pub fn class_task(&self) -> &[usize] {
        &self.class_task
    }

    pub fn task_of(&self, class: usize) -> Option<usize> {
        self.class_task.get(class).copied()
    }
}

/// θ_ClaL.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelClassifier {
    pub head: LinearHead,
}

impl LabelClassifier {
    pub fn new(dim: usize) -> Self {
        Self {
            head: LinearHead::new(dim),
        }
    }

    pub fn extend(&mut self, classes: usize, rng: &mut impl Rng) {
        self.head.extend(classes, HEAD_INIT_STD, rng);
    }

    pub fn classes(&self) -> usize {
        self.head.classes()
    }
}

/// Task index chosen by the prompt classifier for a prompt-free feature.
pub fn predict_prompt(
    feature: &[f64],
    classifier: &PromptClassifier,
    layout: &TaskLayout,
) -> Result<usize> {
    if layout.is_empty() || classifier.classes() == 0 {
        return Err(Error::contract("prompt pool is empty"));
    }
    layout.task_index(argmax(&classifier.head.logits(feature)))
}

/// One-hot P(P_i | x) over a pool of `pool_size` prompts.
pub fn prompt_posterior(task: usize, pool_size: usize) -> Vec<f64> {
    (0..pool_size).map(|i| if i == task { 1.0 } else { 0.0 }).collect()
}

/// Class with the largest label logit for a prompted feature.
pub fn predict_label(feature: &[f64], classifier: &LabelClassifier) -> Result<usize> {
    if classifier.classes() == 0 {
        return Err(Error::contract("label classifier has no classes"));
    }
    Ok(argmax(&classifier.head.logits(feature)))
}

/// Which logits a cross-entropy term normalizes over.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LossScope {
    /// Only the current task's classes (no translated history).
    Classes(Range<usize>),
    /// Every learned class.
    All,
}

/// Cross-entropy of `logits` restricted to `scope`, with its gradient
/// (zero outside the scope).
pub fn scoped_cross_entropy(
    logits: &[f64],
    label: usize,
    scope: &LossScope,
) -> Result<(f64, Vec<f64>)> {
    match scope {
        LossScope::All => {
            if label >= logits.len() {
                return Err(Error::domain(format!("label {label} outside {} logits", logits.len())));
            }
            Ok(softmax_cross_entropy(logits, label))
        }
        LossScope::Classes(r) => {
            if !r.contains(&label) || r.end > logits.len() {
                return Err(Error::domain(format!(
                    "label {label} outside loss scope {r:?} of {} logits",
                    logits.len()
                )));
            }
            let (loss, g) = softmax_cross_entropy(&logits[r.clone()], label - r.start);
            let mut grad = vec![0.0; logits.len()];
            grad[r.clone()].copy_from_slice(&g);
            Ok((loss, grad))
        }
    }
}

/// Mean cross-entropy of a head over `(feature, label)` rows and its
/// parameter gradient.
pub fn head_batch_loss(
    head: &LinearHead,
    rows: &[(&[f64], usize)],
    scope: &LossScope,
) -> Result<(f64, LinearHead)> {
    if rows.is_empty() {
        return Err(Error::domain("empty batch"));
    }
    let inv = 1.0 / rows.len() as f64;
    let mut grads = head.zeros_like();
    let mut loss = 0.0;
    for (f, y) in rows {
        let (l, mut g) = scoped_cross_entropy(&head.logits(f), *y, scope)?;
        loss += l * inv;
        g.iter_mut().for_each(|v| *v *= inv);
        head.backward(f, &g, &mut grads);
    }
    Ok((loss, grads))
}

/// Loss and gradients for one label-stage batch.
#[derive(Debug, Clone)]
pub struct LabelBatch {
    pub loss: f64,
    pub head_grads: LinearHead,
    /// One block per prompted layer.
    pub prompt_grads: Vec<Matrix>,
    /// Prompted features of the live rows, in input order.
    pub features: Vec<Vec<f64>>,
}

/// Mean cross-entropy over live images (through the prompted backbone) and
/// translated feature rows (fed straight to the head, no prompt gradient).
pub fn label_batch_loss(
    backbone: &BackboneParams,
    pool: &PromptPool,
    prompt: &Prompt,
    head: &LinearHead,
    live: &[(&[f64], usize)],
    translated: &[(&[f64], usize)],
    scope: &LossScope,
) -> Result<LabelBatch> {
    let n = live.len() + translated.len();
    if n == 0 {
        return Err(Error::domain("empty batch"));
    }
    let inv = 1.0 / n as f64;
    let mut head_grads = head.zeros_like();
    let mut prompt_grads: Vec<Matrix> = prompt
        .blocks()
        .iter()
        .map(|b| Matrix::zeros(b.rows(), b.cols()))
        .collect();
    let mut features = Vec::with_capacity(live.len());
    let mut loss = 0.0;
    for (image, y) in live {
        let (f, cache) = forward_with_prompt_cached(image, backbone, pool, prompt)?;
        let (l, mut g) = scoped_cross_entropy(&head.logits(&f), *y, scope)?;
        loss += l * inv;
        g.iter_mut().for_each(|v| *v *= inv);
        let d_feature = head.backward(&f, &g, &mut head_grads);
        for (acc, pg) in prompt_grads
            .iter_mut()
            .zip(prompt_backward(backbone, pool, &cache, &d_feature))
        {
            acc.add_assign(&pg);
        }
        features.push(f);
    }
    for (f, y) in translated {
        let (l, mut g) = scoped_cross_entropy(&head.logits(f), *y, scope)?;
        loss += l * inv;
        g.iter_mut().for_each(|v| *v *= inv);
        head.backward(f, &g, &mut head_grads);
    }
    Ok(LabelBatch {
        loss,
        head_grads,
        prompt_grads,
        features,
    })
}
