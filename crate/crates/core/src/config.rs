//! Run configuration file (TOML).
//!
//! Every section is optional; an empty file is a valid synthetic CI run.
//! Relative paths are resolved against the directory of the config file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, PretrainConfig};
use crate::data::{gen_synthetic, load_idx, LabeledImageSet, SyntheticSpec};
use crate::error::{Error, Result};
use crate::harness::{EvalProtocol, Method, SplitSpec};
use crate::pipeline::LearnerConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Method for `run`.
    pub method: Method,
    pub seeds: Vec<u64>,
    /// Frozen backbone file. `pretrain` writes it, the other commands read
    /// it. When absent, `run` pretrains in memory from `[pretrain]`.
    pub backbone_checkpoint: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub backbone: BackboneConfig,
    pub pretrain: PretrainSection,
    pub data: DataSource,
    pub scenario: ScenarioSection,
    pub learner: LearnerConfig,
    pub eval: EvalProtocol,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            method: Method::Preprompt,
            seeds: vec![0, 1, 2],
            backbone_checkpoint: None,
            output_dir: PathBuf::from("results"),
            backbone: BackboneConfig::default(),
            pretrain: PretrainSection::default(),
            data: DataSource::default(),
            scenario: ScenarioSection::default(),
            learner: LearnerConfig::default(),
            eval: EvalProtocol::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub data: DataSource,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let t = PretrainConfig::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            seed: t.seed,
            // a different synthetic family than the CIL data
            data: DataSource::Synthetic(SyntheticSource {
                seed: 1000,
                ..Default::default()
            }),
        }
    }
}

impl PretrainSection {
    pub fn train_config(&self) -> PretrainConfig {
        PretrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DataSource {
    Idx(IdxSource),
    Synthetic(SyntheticSource),
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(SyntheticSource::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxSource {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    /// Keep only the first n samples of each class.
    #[serde(default)]
    pub train_per_class: Option<usize>,
    #[serde(default)]
    pub test_per_class: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSource {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSource {
    fn default() -> Self {
        Self {
            classes: 20,
            train_per_class: 40,
            test_per_class: 20,
            noise: SyntheticSpec::default().noise,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioSection {
    pub tasks: usize,
    pub first_task: Option<usize>,
    pub split_seed: u64,
}

impl Default for ScenarioSection {
    fn default() -> Self {
        Self {
            tasks: 5,
            first_task: None,
            split_seed: 0,
        }
    }
}

impl ScenarioSection {
    pub fn split(&self) -> SplitSpec {
        SplitSpec {
            tasks: self.tasks,
            first_task: self.first_task,
        }
    }
}

impl RunConfig {
    /// Whole-config validation; nothing runs before this passes.
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.learner.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::config("seeds must list at least one seed"));
        }
        let p = &self.pretrain;
        if p.batch_size == 0 {
            return Err(Error::config("pretrain.batch_size must be positive"));
        }
        if !(p.learning_rate > 0.0 && p.learning_rate.is_finite()) {
            return Err(Error::config(format!(
                "pretrain.learning_rate must be positive, got {}",
                p.learning_rate
            )));
        }
        if let Some(layers) = &self.learner.prompted_layers {
            if let Some(&l) = layers.iter().find(|&&l| l >= self.backbone.depth) {
                return Err(Error::config(format!(
                    "learner.prompted_layers contains {l}, backbone depth is {}",
                    self.backbone.depth
                )));
            }
        }
        if self.scenario.tasks == 0 {
            return Err(Error::config("scenario.tasks must be positive"));
        }
        for (name, d) in [("data", &self.data), ("pretrain.data", &p.data)] {
            d.validate(name)?;
        }
        let classes = match &self.data {
            DataSource::Synthetic(s) => Some(s.classes),
            DataSource::Idx(_) => None,
        };
        if let Some(c) = classes {
            self.scenario.split().sizes(c).map_err(|e| Error::config(e.to_string()))?;
        }
        Ok(())
    }

    /// Makes relative paths relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(c) = self.backbone_checkpoint.as_mut() {
            fix(c);
        }
        fix(&mut self.output_dir);
        for d in [&mut self.data, &mut self.pretrain.data] {
            if let DataSource::Idx(s) = d {
                fix(&mut s.train_images);
                fix(&mut s.train_labels);
                fix(&mut s.test_images);
                fix(&mut s.test_labels);
            }
        }
    }
}

impl DataSource {
    fn validate(&self, name: &str) -> Result<()> {
        match self {
            DataSource::Synthetic(s) => {
                if s.classes < 2 {
                    return Err(Error::config(format!("{name}.classes must be at least 2")));
                }
                if s.train_per_class == 0 || s.test_per_class == 0 {
                    return Err(Error::config(format!(
                        "{name} needs at least one train and one test sample per class"
                    )));
                }
                if !(s.noise >= 0.0 && s.noise.is_finite()) {
                    return Err(Error::config(format!("{name}.noise must be non-negative")));
                }
            }
            DataSource::Idx(s) => {
                if s.train_per_class == Some(0) || s.test_per_class == Some(0) {
                    return Err(Error::config(format!("{name} per-class limits must be positive")));
                }
            }
        }
        Ok(())
    }

    /// Loads (train, test) sets for images of the backbone's shape.
    pub fn load(&self, backbone: &BackboneConfig) -> Result<(LabeledImageSet, LabeledImageSet)> {
        match self {
            DataSource::Idx(s) => {
                let mut train = load_idx(&s.train_images, &s.train_labels)?;
                let mut test = load_idx(&s.test_images, &s.test_labels)?;
                if let Some(n) = s.train_per_class {
                    train = train.take_per_class(0, n);
                }
                if let Some(n) = s.test_per_class {
                    test = test.take_per_class(0, n);
                }
                Ok((train, test))
            }
            DataSource::Synthetic(s) => {
                let all = gen_synthetic(&SyntheticSpec {
                    classes: s.classes,
                    per_class: s.train_per_class + s.test_per_class,
                    height: backbone.image_height,
                    width: backbone.image_width,
                    channels: backbone.channels,
                    noise: s.noise,
                    seed: s.seed,
                })?;
                Ok((
                    all.take_per_class(0, s.train_per_class),
                    all.take_per_class(s.train_per_class, s.test_per_class),
                ))
            }
        }
    }
}

/// Parses a config string; schema errors name the offending field path.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let de = toml::Deserializer::new(text);
    let config: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        Error::Schema {
            path: if path == "." { "<root>".into() } else { path },
            message: e.into_inner().message().trim().to_string(),
        }
    })?;
    config.validate()?;
    Ok(config)
}

/// Reads, validates and path-resolves a config file.
pub fn read_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut config = parse_config(&text)?;
    let base = path.parent().unwrap_or(Path::new("."));
    config.resolve_paths(base);
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompting::PromptMode;

    #[test]
    fn empty_config_takes_defaults() {
        let c = parse_config("").unwrap();
        assert_eq!(c.learner.length, 5);
        assert_eq!(c.learner.mode, PromptMode::Prefix);
        assert_eq!(c.learner.layers_for(c.backbone.depth), vec![0, 1, 2]);
    }

    #[test]
    fn negative_learning_rate_rejected() {
        let e = parse_config("[learner.label_stage]\nlearning_rate = -0.1\n").unwrap_err();
        assert!(matches!(e, Error::Config(_)), "{e}");
    }

    #[test]
    fn unknown_key_names_its_path() {
        match parse_config("[learner.prompt_stage]\nepoch = 3\n").unwrap_err() {
            Error::Schema { path, message } => {
                assert!(path.starts_with("learner.prompt_stage"), "{path}");
                assert!(format!("{path} {message}").contains("epoch"), "{path}: {message}");
            }
            e => panic!("unexpected {e}"),
        }
        match parse_config("[data]\nkind = \"synthetic\"\nclases = 4\n").unwrap_err() {
            Error::Schema { path, .. } => assert!(path.starts_with("data"), "{path}"),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn wrong_type_is_schema_error() {
        assert!(matches!(
            parse_config("seeds = \"zero\"\n"),
            Err(Error::Schema { .. })
        ));
    }

    #[test]
    fn idx_source_parses() {
        let c = parse_config(
            "[data]\nkind = \"idx\"\ntrain_images = \"a\"\ntrain_labels = \"b\"\ntest_images = \"c\"\ntest_labels = \"d\"\ntrain_per_class = 5\n",
        )
        .unwrap();
        assert!(matches!(c.data, DataSource::Idx(IdxSource { train_per_class: Some(5), .. })));
    }
}
