use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attack::AttackConfig;
use crate::error::{Error, Result};
use crate::network::ModelConfig;
use crate::tensor::DType;
use crate::training::{Method, TrainConfig};

use super::data::DatasetSpec;

fn default_widths() -> Vec<usize> {
    vec![16, 32]
}
fn default_eps() -> f64 {
    1e-5
}
fn default_momentum() -> f64 {
    0.1
}
fn default_seeds() -> Vec<u64> {
    vec![0]
}

/// Architecture knobs; input shape and class counts come from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    #[serde(default = "default_widths")]
    pub widths: Vec<usize>,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_momentum")]
    pub bn_momentum: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            widths: default_widths(),
            eps: default_eps(),
            bn_momentum: default_momentum(),
        }
    }
}

impl ArchConfig {
    pub fn model_config(&self, input: [usize; 3], classes: usize, dtype: DType) -> ModelConfig {
        let mut c = ModelConfig::new(input, classes);
        c.widths = self.widths.clone();
        c.eps = self.eps;
        c.bn_momentum = self.bn_momentum;
        c.dtype = dtype;
        c
    }
}

/// One experiment: data, model, optional source pre-training, fine-tuning
/// and evaluation, repeated per seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub dtype: DType,
    #[serde(default)]
    pub model: ArchConfig,
    pub target: DatasetSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<DatasetSpec>,
    /// Pre-trained source model to fine-tune instead of pre-training here.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_checkpoint: Option<PathBuf>,
    /// Robust source pre-training; must use `method: "at"`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretrain: Option<TrainConfig>,
    pub finetune: TrainConfig,
    /// Final evaluation attack; defaults to the fine-tuning attack with CE.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_attack: Option<AttackConfig>,
}

/// Command-line replacements for config keys.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub method: Option<Method>,
}

impl ExperimentConfig {
    /// Parses and validates; relative file paths resolve against `base`.
    pub fn from_json(text: &str, base: Option<&Path>) -> Result<Self> {
        let mut cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(base) = base {
            cfg.resolve_paths(base);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path.parent())
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for spec in std::iter::once(&mut self.target).chain(self.source.as_mut()) {
            if let DatasetSpec::Idx { images, labels, .. } = spec {
                fix(images);
                fix(labels);
            }
        }
        if let Some(p) = self.init_checkpoint.as_mut() {
            fix(p);
        }
    }

    /// Applies `o`; on a validation error `self` is left untouched.
    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        let mut next = self.clone();
        if let Some(s) = o.seed {
            next.seeds = vec![s];
        }
        if let Some(p) = &o.output_dir {
            next.output_dir = p.clone();
        }
        if let Some(m) = o.method {
            next.finetune.method = m;
        }
        next.validate()?;
        *self = next;
        Ok(())
    }

    /// Whether fine-tuning starts from a source model.
    pub fn has_pretrained(&self) -> bool {
        self.pretrain.is_some() || self.init_checkpoint.is_some()
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        self.target.validate()?;
        if let Some(s) = &self.source {
            s.validate()?;
        }
        if let Some(p) = &self.init_checkpoint {
            if !p.is_file() {
                return Err(Error::Config(format!("init checkpoint {} does not exist", p.display())));
            }
            if self.pretrain.is_some() {
                return Err(Error::Config("set either init_checkpoint or pretrain, not both".into()));
            }
        }
        if let Some(p) = &self.pretrain {
            p.validate()?;
            if p.method != Method::At {
                return Err(Error::Config(format!("source pre-training uses method `at`, got `{}`", p.method)));
            }
            if self.source.is_none() {
                return Err(Error::Config("pre-training needs a `source` dataset".into()));
            }
        }
        self.finetune.validate()?;
        let m = self.finetune.method;
        if m == Method::Joint && self.source.is_none() {
            return Err(Error::Config("the joint objective needs a `source` dataset".into()));
        }
        if (m.is_twins() || m == Method::Lwf || m == Method::Joint) && !self.has_pretrained() {
            return Err(Error::Config(format!(
                "method `{m}` fine-tunes a pre-trained source model; set `pretrain` or `init_checkpoint`"
            )));
        }
        if let Some(a) = &self.eval_attack {
            a.validate()?;
        }
        Ok(())
    }
}
