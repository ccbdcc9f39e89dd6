use std::sync::Arc;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    head_batch_loss, label_batch_loss, predict_label, predict_prompt, LabelClassifier,
    LossScope, PromptClassifier, TaskLayout,
};
use crate::backbone::BackboneParams;
use crate::error::{Error, Result};
use crate::harness::{ClassMap, Learner, TaskData};
use crate::numeric::ops::argmax;
use crate::numeric::{dot, AdamState, Matrix};
use crate::prompting::{
    default_prompted_layers, forward_with_prompt, Prompt, PromptMode, PromptPool,
};
use crate::translation::{
    build_translation_by, compute_prototype, sample_with, Distance, PrototypeStore,
    TranslatedFeatureSet,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 24,
            learning_rate: 5e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LabelStageConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Label classifier learning rate.
    pub learning_rate: f64,
    pub prompt_learning_rate: f64,
}

impl Default for LabelStageConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 24,
            learning_rate: 0.1,
            prompt_learning_rate: 1e-2,
        }
    }
}

/// Component switches of the ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationFlags {
    /// Two-stage prediction with per-task prompts. Off means a single head
    /// on prompt-free features.
    pub prompt_prediction: bool,
    /// Feature translation for the prompt classifier.
    pub prompt_translation: bool,
    /// Feature translation for the label classifier (or the single head).
    pub label_translation: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self {
            prompt_prediction: true,
            prompt_translation: true,
            label_translation: true,
        }
    }
}

impl AblationFlags {
    pub const fn new(prompt_prediction: bool, prompt_translation: bool, label_translation: bool) -> Self {
        Self {
            prompt_prediction,
            prompt_translation,
            label_translation,
        }
    }
}

/// How the task prompt is chosen at test time.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Selection {
    /// Prompt classifier plus fine-to-coarse indexing.
    #[default]
    Predictive,
    /// One learned key per task; highest cosine similarity wins.
    KeyCorrelation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearnerConfig {
    pub mode: PromptMode,
    pub length: usize,
    /// 0-based layer indices; `None` means the depth-scaled default.
    pub prompted_layers: Option<Vec<usize>>,
    pub prompt_stage: StageConfig,
    pub label_stage: LabelStageConfig,
    pub flags: AblationFlags,
    pub distance: Distance,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            mode: PromptMode::Prefix,
            length: 5,
            prompted_layers: None,
            prompt_stage: StageConfig::default(),
            label_stage: LabelStageConfig::default(),
            flags: AblationFlags::default(),
            distance: Distance::Euclidean,
        }
    }
}

impl LearnerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.length == 0 {
            return Err(Error::config("prompt length must be positive"));
        }
        for (name, bs, lr) in [
            ("prompt_stage", self.prompt_stage.batch_size, self.prompt_stage.learning_rate),
            ("label_stage", self.label_stage.batch_size, self.label_stage.learning_rate),
            (
                "label_stage",
                self.label_stage.batch_size,
                self.label_stage.prompt_learning_rate,
            ),
        ] {
            if bs == 0 {
                return Err(Error::config(format!("{name}.batch_size must be positive")));
            }
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::config(format!(
                    "{name} learning rates must be positive, got {lr}"
                )));
            }
        }
        Ok(())
    }

    pub fn layers_for(&self, depth: usize) -> Vec<usize> {
        self.prompted_layers
            .clone()
            .unwrap_or_else(|| default_prompted_layers(depth))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub epochs: usize,
    pub final_loss: f64,
    pub train_accuracy: f64,
}

/// Mixes a run seed with a task index and a stream tag (splitmix64).
pub fn seed_for(seed: u64, task: usize, stream: u64) -> u64 {
    let mut z = seed
        ^ (task as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) const STREAM_PROMPT_STAGE: u64 = 1;
pub(crate) const STREAM_PROMPT_INIT: u64 = 2;
pub(crate) const STREAM_LABEL_STAGE: u64 = 3;

/// Number of translated rows to add to a live batch so that old and new
/// classes get the same expected per-class share.
pub(crate) fn translated_rows(live: usize, old_classes: usize, new_classes: usize) -> usize {
    if old_classes == 0 || live == 0 {
        return 0;
    }
    (live * old_classes).div_ceil(new_classes).max(1)
}

/// Trains θ_ClaP on prompt-free features. Only the classifier changes.
#[allow(clippy::too_many_arguments)]
pub fn train_prompt_stage(
    backbone: &BackboneParams,
    classifier: &mut PromptClassifier,
    features: &[Vec<f64>],
    labels: &[usize],
    translated: Option<&TranslatedFeatureSet>,
    scope: &LossScope,
    config: &StageConfig,
    rng: &mut ChaCha8Rng,
) -> Result<StageReport> {
    backbone.ensure_frozen()?;
    train_head(
        &mut classifier.head,
        features,
        labels,
        translated,
        scope,
        config.epochs,
        config.batch_size,
        config.learning_rate,
        rng,
    )
}

/// Mini-batch Adam on a linear head over fixed features, with optional
/// translated rows mixed into every batch.
#[allow(clippy::too_many_arguments)]
pub(crate) fn train_head(
    head: &mut crate::head::LinearHead,
    features: &[Vec<f64>],
    labels: &[usize],
    translated: Option<&TranslatedFeatureSet>,
    scope: &LossScope,
    epochs: usize,
    batch_size: usize,
    learning_rate: f64,
    rng: &mut ChaCha8Rng,
) -> Result<StageReport> {
    if features.len() != labels.len() {
        return Err(Error::domain("features and labels differ in length"));
    }
    let new_classes = count_distinct(labels);
    let translated = translated.filter(|t| !t.is_empty());
    let mut adam = AdamState::new(head.num_params(), learning_rate)?;
    let mut order: Vec<usize> = (0..features.len()).collect();
    let mut final_loss = f64::NAN;
    for _ in 0..epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        let mut batches = 0;
        for batch in order.chunks(batch_size) {
            let extra = match translated {
                Some(t) => {
                    let n = translated_rows(batch.len(), t.len(), new_classes);
                    Some(sample_with(t, n, rng)?)
                }
                None => None,
            };
            let mut rows: Vec<(&[f64], usize)> =
                batch.iter().map(|&i| (features[i].as_slice(), labels[i])).collect();
            if let Some((m, ls)) = &extra {
                rows.extend(m.iter_rows().zip(ls.iter().copied()));
            }
            let (loss, grads) = head_batch_loss(head, &rows, scope)?;
            let mut flat = head.to_flat();
            adam.step(&mut flat, &grads.to_flat())?;
            head.load_flat(&flat)?;
            total += loss;
            batches += 1;
        }
        if batches > 0 {
            final_loss = total / batches as f64;
        }
    }
    let correct = features
        .iter()
        .zip(labels)
        .filter(|(f, &y)| argmax(&head.logits(f)) == y)
        .count();
    Ok(StageReport {
        epochs,
        final_loss,
        train_accuracy: if features.is_empty() {
            0.0
        } else {
            correct as f64 / features.len() as f64
        },
    })
}

fn count_distinct(labels: &[usize]) -> usize {
    let mut v = labels.to_vec();
    v.sort_unstable();
    v.dedup();
    v.len().max(1)
}

/// Label-stage translation source: prompted-space prototypes of old classes.
pub struct LabelTranslation<'a> {
    pub store: &'a PrototypeStore,
    pub distance: Distance,
}

/// Output of [`train_label_stage`].
#[derive(Debug, Clone)]
pub struct LabelStageOutput {
    pub report: StageReport,
    /// Prompted features of every training image under the final prompt.
    pub features: Vec<Vec<f64>>,
}

/// Jointly trains θ_ClaL and the prompt of `task`. Translated rows, when
/// enabled, are rebuilt each epoch from the previous epoch's live features.
#[allow(clippy::too_many_arguments)]
pub fn train_label_stage(
    backbone: &BackboneParams,
    pool: &mut PromptPool,
    task: usize,
    classifier: &mut LabelClassifier,
    images: &[&[f64]],
    labels: &[usize],
    translation: Option<LabelTranslation<'_>>,
    scope: &LossScope,
    config: &LabelStageConfig,
    rng: &mut ChaCha8Rng,
) -> Result<LabelStageOutput> {
    backbone.ensure_frozen()?;
    if images.len() != labels.len() {
        return Err(Error::domain("images and labels differ in length"));
    }
    // fail early if the prompt is not trainable
    let mut prompt: Prompt = pool.prompt_mut(task)?.clone();
    let frozen_pool = pool.clone();
    let head = &mut classifier.head;
    let mut head_adam = AdamState::new(head.num_params(), config.learning_rate)?;
    let mut prompt_adam = AdamState::new(prompt.num_params(), config.prompt_learning_rate)?;
    let mut order: Vec<usize> = (0..images.len()).collect();
    let new_classes = count_distinct(labels);

    let mut live: Vec<Vec<f64>> = Vec::new();
    if translation.is_some() && config.epochs > 0 {
        live = prompted_features(backbone, &frozen_pool, &prompt, images)?;
    }
    let mut final_loss = f64::NAN;
    for epoch in 0..config.epochs {
        let translated = match &translation {
            Some(t) => Some(build_translation_by(
                t.distance,
                t.store,
                &group_by_class(&live, labels),
            )?),
            None => None,
        }
        .filter(|t| !t.is_empty());
        order.shuffle(rng);
        let mut total = 0.0;
        let mut batches = 0;
        for batch in order.chunks(config.batch_size) {
            let extra = match &translated {
                Some(t) => {
                    let n = translated_rows(batch.len(), t.len(), new_classes);
                    Some(sample_with(t, n, rng)?)
                }
                None => None,
            };
            let rows: Vec<(&[f64], usize)> = batch.iter().map(|&i| (images[i], labels[i])).collect();
            let extra_rows: Vec<(&[f64], usize)> = match &extra {
                Some((m, ls)) => m.iter_rows().zip(ls.iter().copied()).collect(),
                None => Vec::new(),
            };
            let out = label_batch_loss(
                backbone,
                &frozen_pool,
                &prompt,
                head,
                &rows,
                &extra_rows,
                scope,
            )?;
            if !out.loss.is_finite() {
                return Err(Error::domain(format!(
                    "label stage loss became non-finite at epoch {epoch}"
                )));
            }
            let mut flat = head.to_flat();
            head_adam.step(&mut flat, &out.head_grads.to_flat())?;
            head.load_flat(&flat)?;
            let mut pflat: Vec<f64> = prompt.blocks().iter().flat_map(|b| b.data().to_vec()).collect();
            let pgrad: Vec<f64> = out.prompt_grads.iter().flat_map(|b| b.data().to_vec()).collect();
            prompt_adam.step(&mut pflat, &pgrad)?;
            load_prompt(&mut prompt, &pflat);
            if translation.is_some() {
                if live.len() != images.len() {
                    live = vec![Vec::new(); images.len()];
                }
                for (&i, f) in batch.iter().zip(out.features) {
                    live[i] = f;
                }
            }
            total += out.loss;
            batches += 1;
        }
        if batches > 0 {
            final_loss = total / batches as f64;
        }
        debug!("label stage task={task} epoch={} loss={final_loss:.6}", epoch + 1);
    }
    *pool.prompt_mut(task)? = prompt.clone();
    let features = prompted_features(backbone, pool, &prompt, images)?;
    let correct = features
        .iter()
        .zip(labels)
        .filter(|(f, &y)| argmax(&head.logits(f)) == y)
        .count();
    Ok(LabelStageOutput {
        report: StageReport {
            epochs: config.epochs,
            final_loss,
            train_accuracy: if images.is_empty() {
                0.0
            } else {
                correct as f64 / images.len() as f64
            },
        },
        features,
    })
}

fn load_prompt(prompt: &mut Prompt, flat: &[f64]) {
    let mut at = 0;
    for b in prompt.blocks_mut() {
        let n = b.data().len();
        b.data_mut().copy_from_slice(&flat[at..at + n]);
        at += n;
    }
}

fn prompted_features(
    backbone: &BackboneParams,
    pool: &PromptPool,
    prompt: &Prompt,
    images: &[&[f64]],
) -> Result<Vec<Vec<f64>>> {
    images
        .iter()
        .map(|x| forward_with_prompt(x, backbone, pool, Some(prompt)))
        .collect()
}

/// Groups feature rows by label, classes in ascending order.
pub(crate) fn group_by_class(features: &[Vec<f64>], labels: &[usize]) -> Vec<(usize, Matrix)> {
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    classes
        .into_iter()
        .map(|c| {
            let rows: Vec<Vec<f64>> = features
                .iter()
                .zip(labels)
                .filter(|(_, &y)| y == c)
                .map(|(f, _)| f.clone())
                .collect();
            let dim = rows.first().map_or(0, Vec::len);
            let m = if rows.is_empty() {
                Matrix::zeros(0, dim)
            } else {
                Matrix::from_rows(&rows).expect("rows share the feature width")
            };
            (c, m)
        })
        .collect()
}

/// Task keys for correlation-based selection.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskKeys {
    pub keys: Vec<Vec<f64>>,
}

fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

pub(crate) fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let d = norm(a) * norm(b);
    if d == 0.0 {
        0.0
    } else {
        dot(a, b) / d
    }
}

impl TaskKeys {
    /// Learns a key for a new task by minimizing mean(1 − cos(k, f)).
    pub fn learn(
        &mut self,
        features: &[Vec<f64>],
        config: &StageConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        let dim = features
            .first()
            .map(Vec::len)
            .ok_or_else(|| Error::domain("cannot learn a key from no features"))?;
        let mut key = Matrix::randn(1, dim, 0.02, rng).into_data();
        let mut adam = AdamState::new(dim, config.learning_rate)?;
        let mut order: Vec<usize> = (0..features.len()).collect();
        for _ in 0..config.epochs {
            order.shuffle(rng);
            for batch in order.chunks(config.batch_size) {
                let mut grad = vec![0.0; dim];
                let kn = norm(&key).max(1e-12);
                for &i in batch {
                    let f = &features[i];
                    let fn_ = norm(f).max(1e-12);
                    let c = dot(&key, f) / (kn * fn_);
                    for d in 0..dim {
                        grad[d] -= (f[d] / (kn * fn_) - c * key[d] / (kn * kn)) / batch.len() as f64;
                    }
                }
                adam.step(&mut key, &grad)?;
            }
        }
        self.keys.push(key);
        Ok(())
    }

    pub fn select(&self, feature: &[f64]) -> Result<usize> {
        if self.keys.is_empty() {
            return Err(Error::contract("no task keys learned"));
        }
        let sims: Vec<f64> = self.keys.iter().map(|k| cosine(k, feature)).collect();
        Ok(argmax(&sims))
    }
}

/// Full system state: frozen backbone, prompt pool, both classifiers and
/// both prototype stores.
#[derive(Debug, Clone)]
pub struct PrePrompt {
    pub(crate) backbone: Arc<BackboneParams>,
    pub(crate) config: LearnerConfig,
    pub(crate) selection: Selection,
    pub(crate) seed: u64,
    pub(crate) classes: ClassMap,
    pub(crate) layout: TaskLayout,
    pub(crate) pool: PromptPool,
    pub(crate) prompt_classifier: PromptClassifier,
    pub(crate) label_classifier: LabelClassifier,
    pub(crate) keys: TaskKeys,
    /// Prototypes of prompt-free features (prompt-stage translation).
    pub(crate) free_prototypes: PrototypeStore,
    /// Prototypes of prompted features (label-stage translation).
    pub(crate) label_prototypes: PrototypeStore,
    pub(crate) reports: Vec<(StageReport, StageReport)>,
}

impl PrePrompt {
    pub fn new(backbone: Arc<BackboneParams>, config: &LearnerConfig, seed: u64) -> Result<Self> {
        Self::with_selection(backbone, config, Selection::Predictive, seed)
    }

    pub fn with_selection(
        backbone: Arc<BackboneParams>,
        config: &LearnerConfig,
        selection: Selection,
        seed: u64,
    ) -> Result<Self> {
        backbone.ensure_frozen()?;
        config.validate()?;
        if !config.flags.prompt_prediction {
            return Err(Error::config(
                "prompt prediction disabled: use the single-head learner",
            ));
        }
        let c = backbone.config;
        let pool = PromptPool::new(
            config.mode,
            config.length,
            config.layers_for(c.depth),
            c.embed_dim,
            c.depth,
        )?;
        Ok(Self {
            config: config.clone(),
            selection,
            seed,
            classes: ClassMap::default(),
            layout: TaskLayout::default(),
            pool,
            prompt_classifier: PromptClassifier::new(c.embed_dim),
            label_classifier: LabelClassifier::new(c.embed_dim),
            keys: TaskKeys::default(),
            free_prototypes: PrototypeStore::new(),
            label_prototypes: PrototypeStore::new(),
            reports: Vec::new(),
            backbone,
        })
    }

    pub fn backbone(&self) -> &BackboneParams {
        &self.backbone
    }

    pub fn pool(&self) -> &PromptPool {
        &self.pool
    }

    pub fn layout(&self) -> &TaskLayout {
        &self.layout
    }

    pub fn class_map(&self) -> &ClassMap {
        &self.classes
    }

    pub fn prompt_classifier(&self) -> &PromptClassifier {
        &self.prompt_classifier
    }

    pub fn label_classifier(&self) -> &LabelClassifier {
        &self.label_classifier
    }

    pub fn free_prototypes(&self) -> &PrototypeStore {
        &self.free_prototypes
    }

    pub fn label_prototypes(&self) -> &PrototypeStore {
        &self.label_prototypes
    }

    pub fn config(&self) -> &LearnerConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// (prompt stage, label stage) training reports per task.
    pub fn reports(&self) -> &[(StageReport, StageReport)] {
        &self.reports
    }

    /// Task whose prompt is used for `image`.
    pub fn predict_task(&self, image: &[f64]) -> Result<usize> {
        let f = self.backbone.feature(image, &[])?;
        match self.selection {
            Selection::Predictive => predict_prompt(&f, &self.prompt_classifier, &self.layout),
            Selection::KeyCorrelation => self.keys.select(&f),
        }
    }

    /// Global class predicted for `image` under task `task`'s prompt.
    pub fn classify_with_task(&self, image: &[f64], task: usize) -> Result<usize> {
        let prompt = self
            .pool
            .get(task)
            .ok_or_else(|| Error::domain(format!("no prompt for task {task}")))?;
        let f = forward_with_prompt(image, &self.backbone, &self.pool, Some(prompt))?;
        predict_label(&f, &self.label_classifier)
    }

    /// Global class id: the two stages composed.
    pub fn classify_global(&self, image: &[f64]) -> Result<usize> {
        self.classify_with_task(image, self.predict_task(image)?)
    }

    /// Prompted feature of `image` under its predicted prompt, with the task.
    pub fn embed(&self, image: &[f64]) -> Result<(usize, Vec<f64>)> {
        let task = self.predict_task(image)?;
        let prompt = self.pool.get(task).expect("predicted task has a prompt");
        Ok((
            task,
            forward_with_prompt(image, &self.backbone, &self.pool, Some(prompt))?,
        ))
    }
}

impl Learner for PrePrompt {
    fn name(&self) -> String {
        match self.selection {
            Selection::Predictive => "preprompt".into(),
            Selection::KeyCorrelation => "kv-correlation".into(),
        }
    }

    fn learn_task(&mut self, data: &TaskData<'_>) -> Result<()> {
        let t = self.pool.len();
        let offset = self.classes.len();
        self.classes.extend(data.classes)?;
        self.layout.push(data.classes.len())?;
        let n_new = data.classes.len();
        let labels: Vec<usize> = (0..data.train.len())
            .map(|i| self.classes.global_of(data.train.label(i)))
            .collect::<Result<_>>()?;
        let images: Vec<&[f64]> = (0..data.train.len()).map(|i| data.train.image(i)).collect();
        let flags = self.config.flags;
        info!(
            "{} task={} classes={:?} samples={}",
            self.name(),
            t,
            data.classes,
            images.len()
        );

        // prompt stage on prompt-free features
        let free: Vec<Vec<f64>> = images
            .iter()
            .map(|x| self.backbone.feature(x, &[]))
            .collect::<Result<_>>()?;
        let by_class = group_by_class(&free, &labels);
        let mut rng = ChaCha8Rng::seed_from_u64(seed_for(self.seed, t, STREAM_PROMPT_STAGE));
        let prompt_report = match self.selection {
            Selection::Predictive => {
                self.prompt_classifier.extend(t, n_new, &mut rng);
                let use_translation = flags.prompt_translation && !self.free_prototypes.is_empty();
                let translated = if use_translation {
                    Some(build_translation_by(
                        self.config.distance,
                        &self.free_prototypes,
                        &by_class,
                    )?)
                } else {
                    None
                };
                let scope = if use_translation {
                    LossScope::All
                } else {
                    LossScope::Classes(offset..offset + n_new)
                };
                train_prompt_stage(
                    &self.backbone,
                    &mut self.prompt_classifier,
                    &free,
                    &labels,
                    translated.as_ref(),
                    &scope,
                    &self.config.prompt_stage,
                    &mut rng,
                )?
            }
            Selection::KeyCorrelation => {
                self.keys.learn(&free, &self.config.prompt_stage, &mut rng)?;
                StageReport::default()
            }
        };
        for (c, f) in &by_class {
            self.free_prototypes.insert(*c, t, compute_prototype(f)?)?;
        }

        // label stage with the new task prompt
        self.pool
            .alloc_task_prompt(t + 1, seed_for(self.seed, t, STREAM_PROMPT_INIT))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed_for(self.seed, t, STREAM_LABEL_STAGE));
        self.label_classifier.extend(n_new, &mut rng);
        let use_translation = flags.label_translation
            && self.selection == Selection::Predictive
            && !self.label_prototypes.is_empty();
        let scope = if use_translation {
            LossScope::All
        } else {
            LossScope::Classes(offset..offset + n_new)
        };
        let translation = use_translation.then_some(LabelTranslation {
            store: &self.label_prototypes,
            distance: self.config.distance,
        });
        let out = train_label_stage(
            &self.backbone,
            &mut self.pool,
            t,
            &mut self.label_classifier,
            &images,
            &labels,
            translation,
            &scope,
            &self.config.label_stage,
            &mut rng,
        )?;
        for (c, f) in group_by_class(&out.features, &labels) {
            self.label_prototypes.insert(c, t, compute_prototype(&f)?)?;
        }
        self.pool.complete_all();
        info!(
            "{} task={} prompt_acc={:.4} label_acc={:.4} label_loss={:.5}",
            self.name(),
            t,
            prompt_report.train_accuracy,
            out.report.train_accuracy,
            out.report.final_loss
        );
        self.reports.push((prompt_report, out.report));
        Ok(())
    }

    fn classify(&self, image: &[f64]) -> Result<u32> {
        self.classes.label_of(self.classify_global(image)?)
    }

    fn selected_task(&self, image: &[f64]) -> Result<Option<usize>> {
        self.predict_task(image).map(Some)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn translated_row_count_balances_classes() {
        assert_eq!(translated_rows(24, 2, 2), 24);
        assert_eq!(translated_rows(24, 8, 2), 96);
        assert_eq!(translated_rows(24, 0, 2), 0);
        assert_eq!(translated_rows(1, 1, 4), 1);
    }

    #[test]
    fn seeds_differ_by_stream_and_task() {
        let a = seed_for(1, 0, 1);
        assert_ne!(a, seed_for(1, 1, 1));
        assert_ne!(a, seed_for(1, 0, 2));
        assert_eq!(a, seed_for(1, 0, 1));
    }

    #[test]
    fn key_selection_prefers_aligned_key() {
        let keys = TaskKeys {
            keys: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        };
        assert_eq!(keys.select(&[0.1, 2.0]).unwrap(), 1);
    }
}
