use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{run_scenario, AccuracyMatrix, ClassMap, EvalProtocol, Learner, Scenario, ScenarioResult, TaskData};
use crate::backbone::BackboneParams;
use crate::error::{Error, Result};
use crate::head::LinearHead;
use crate::numeric::ops::argmax;
use crate::pipeline::{group_by_class, train_head, STREAM_LABEL_STAGE};
use crate::pipeline::{seed_for, AblationFlags, LearnerConfig, LossScope, PrePrompt, Selection};
use crate::translation::{build_translation_by, compute_prototype, PrototypeStore};

/// One growing linear head on prompt-free features. With `translation`
/// off this is plain sequential fine-tuning.
#[derive(Debug, Clone)]
pub struct Finetune {
    backbone: Arc<BackboneParams>,
    config: LearnerConfig,
    translation: bool,
    seed: u64,
    classes: ClassMap,
    head: LinearHead,
    prototypes: PrototypeStore,
    tasks: usize,
}

impl Finetune {
    pub fn new(
        backbone: Arc<BackboneParams>,
        config: &LearnerConfig,
        translation: bool,
        seed: u64,
    ) -> Result<Self> {
        backbone.ensure_frozen()?;
        config.validate()?;
        Ok(Self {
            head: LinearHead::new(backbone.config.embed_dim),
            backbone,
            config: config.clone(),
            translation,
            seed,
            classes: ClassMap::default(),
            prototypes: PrototypeStore::new(),
            tasks: 0,
        })
    }

    pub fn head(&self) -> &LinearHead {
        &self.head
    }
}

impl Learner for Finetune {
    fn name(&self) -> String {
        if self.translation {
            "finetune+translation".into()
        } else {
            "finetune".into()
        }
    }

    fn learn_task(&mut self, data: &TaskData<'_>) -> Result<()> {
        let t = self.tasks;
        self.classes.extend(data.classes)?;
        let labels: Vec<usize> = data
            .train
            .labels()
            .iter()
            .map(|&l| self.classes.global_of(l))
            .collect::<Result<_>>()?;
        let features: Vec<Vec<f64>> = (0..data.train.len())
            .map(|i| self.backbone.feature(data.train.image(i), &[]))
            .collect::<Result<_>>()?;
        let by_class = group_by_class(&features, &labels);
        let mut rng = ChaCha8Rng::seed_from_u64(seed_for(self.seed, t, STREAM_LABEL_STAGE));
        self.head
            .extend(data.classes.len(), crate::head::HEAD_INIT_STD, &mut rng);
        let translated = if self.translation && !self.prototypes.is_empty() {
            Some(build_translation_by(
                self.config.distance,
                &self.prototypes,
                &by_class,
            )?)
        } else {
            None
        };
        let stage = &self.config.label_stage;
        let report = train_head(
            &mut self.head,
            &features,
            &labels,
            translated.as_ref(),
            &LossScope::All,
            stage.epochs,
            stage.batch_size,
            stage.learning_rate,
            &mut rng,
        )?;
        for (c, f) in &by_class {
            self.prototypes.insert(*c, t, compute_prototype(f)?)?;
        }
        self.tasks += 1;
        info!(
            "{} task={t} train_acc={:.4} loss={:.5}",
            self.name(),
            report.train_accuracy,
            report.final_loss
        );
        Ok(())
    }

    fn classify(&self, image: &[f64]) -> Result<u32> {
        let f = self.backbone.feature(image, &[])?;
        self.classes.label_of(argmax(&self.head.logits(&f)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Preprompt,
    Finetune,
    KvCorrelation,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Preprompt, Method::Finetune, Method::KvCorrelation];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Preprompt => "preprompt",
            Method::Finetune => "finetune",
            Method::KvCorrelation => "kv-correlation",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::domain(format!("unknown method {s:?}")))
    }
}

/// Learner for a method; the config's ablation flags apply to PrePrompt.
pub fn build_learner(
    method: Method,
    backbone: Arc<BackboneParams>,
    config: &LearnerConfig,
    seed: u64,
) -> Result<Box<dyn Learner>> {
    Ok(match method {
        Method::Preprompt if !config.flags.prompt_prediction => Box::new(Finetune::new(
            backbone,
            config,
            config.flags.label_translation,
            seed,
        )?),
        Method::Preprompt => Box::new(PrePrompt::new(backbone, config, seed)?),
        Method::Finetune => Box::new(Finetune::new(backbone, config, false, seed)?),
        Method::KvCorrelation => {
            let mut c = config.clone();
            c.flags = AblationFlags::new(true, false, false);
            Box::new(PrePrompt::with_selection(
                backbone,
                &c,
                Selection::KeyCorrelation,
                seed,
            )?)
        }
    })
}

pub fn run_method(
    method: Method,
    scenario: &Scenario,
    backbone: Arc<BackboneParams>,
    config: &LearnerConfig,
    seed: u64,
    protocol: &EvalProtocol,
) -> Result<ScenarioResult> {
    let mut learner = build_learner(method, backbone, config, seed)?;
    run_scenario(scenario, learner.as_mut(), protocol)
}

pub fn baseline_finetune(
    scenario: &Scenario,
    backbone: Arc<BackboneParams>,
    config: &LearnerConfig,
    seed: u64,
    protocol: &EvalProtocol,
) -> Result<ScenarioResult> {
    run_method(Method::Finetune, scenario, backbone, config, seed, protocol)
}

pub fn baseline_kv_correlation(
    scenario: &Scenario,
    backbone: Arc<BackboneParams>,
    config: &LearnerConfig,
    seed: u64,
    protocol: &EvalProtocol,
) -> Result<ScenarioResult> {
    run_method(Method::KvCorrelation, scenario, backbone, config, seed, protocol)
}

/// The six component combinations of the ablation grid, in table order.
pub const ABLATION_ROWS: [AblationFlags; 6] = [
    AblationFlags::new(false, false, false),
    AblationFlags::new(false, false, true),
    AblationFlags::new(true, false, false),
    AblationFlags::new(true, true, false),
    AblationFlags::new(true, false, true),
    AblationFlags::new(true, true, true),
];

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub row: usize,
    pub flags: AblationFlags,
    pub result: ScenarioResult,
}

impl AblationRow {
    pub fn matrix(&self) -> &AccuracyMatrix {
        &self.result.matrix
    }
}

/// Runs the selected rows of [`ABLATION_ROWS`] under one seed.
pub fn ablation_suite(
    scenario: &Scenario,
    backbone: Arc<BackboneParams>,
    config: &LearnerConfig,
    rows: &[usize],
    seed: u64,
    protocol: &EvalProtocol,
) -> Result<Vec<AblationRow>> {
    rows.iter()
        .map(|&row| {
            let flags = *ABLATION_ROWS
                .get(row)
                .ok_or_else(|| Error::domain(format!("ablation row {row} does not exist")))?;
            let mut c = config.clone();
            c.flags = flags;
            let result = run_method(Method::Preprompt, scenario, backbone.clone(), &c, seed, protocol)?;
            Ok(AblationRow { row, flags, result })
        })
        .collect()
}
