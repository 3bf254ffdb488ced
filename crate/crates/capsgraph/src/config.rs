//! JSON run configuration: `model`, `routing`, `train`, `data` plus
//! command-specific sections. Unknown keys anywhere are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use capsgraph_core::{Init, LossKind, ModelConfig, RoutingConfig};
use serde::{Deserialize, Serialize};

use crate::ablation::AblationGrid;
use crate::dataset::Format;
use crate::error::{Error, Result};
use crate::synthetic::SyntheticConfig;

/// Architecture hyperparameters; class count and vocabulary size come from data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub embed_dim: usize,
    pub ngram: usize,
    pub stride: usize,
    pub conv_channels: usize,
    pub capsule_channels: usize,
    pub num_capsules: usize,
    pub capsule_dim: usize,
    pub max_len: usize,
    pub loss: LossKind,
    pub init: Init,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            embed_dim: m.embed_dim,
            ngram: m.ngram,
            stride: m.stride,
            conv_channels: m.conv_channels,
            capsule_channels: m.capsule_channels,
            num_capsules: m.num_capsules,
            capsule_dim: m.capsule_dim,
            max_len: m.max_len,
            loss: m.loss,
            init: m.init,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    /// No default is implied by the method; ten suits the small corpora here.
    pub epochs: usize,
    /// Evaluate on the test split every this many epochs (0 = never).
    pub eval_every: usize,
    pub seed: u64,
    pub checkpoint: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            batch_size: 32,
            epochs: 10,
            eval_every: 1,
            seed: 0,
            checkpoint: None,
            metrics: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    /// Inferred from the extension when absent.
    pub format: Option<Format>,
    pub min_count: usize,
    /// Upper bound on vocabulary entries, `<pad>` and `<unk>` included.
    pub max_vocab: usize,
    /// Generate a keyword corpus in memory instead of reading files.
    pub synthetic: Option<SyntheticConfig>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train: None,
            test: None,
            format: None,
            min_count: 1,
            max_vocab: 50_000,
            synthetic: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Parameter budget; larger models are refused.
    pub max_params: usize,
    pub num_classes: usize,
    pub vocab_size: usize,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-3,
            max_params: 20_000,
            num_classes: 3,
            vocab_size: 16,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub routing: RoutingConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub ablate: AblationGrid,
    pub gradcheck: GradcheckConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.train.lr > 0.0 && self.train.lr.is_finite()) {
            return Err(Error::Config("train.lr must be positive".into()));
        }
        if self.train.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        if self.data.max_vocab < 2 {
            return Err(Error::Config("data.max_vocab must cover <pad> and <unk>".into()));
        }
        self.routing.validate()?;
        Ok(())
    }

    /// The full model configuration once the data fixes `C` and `V`.
    pub fn model_config(&self, num_classes: usize, vocab_size: usize) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            embed_dim: m.embed_dim,
            ngram: m.ngram,
            stride: m.stride,
            conv_channels: m.conv_channels,
            capsule_channels: m.capsule_channels,
            num_capsules: m.num_capsules,
            capsule_dim: m.capsule_dim,
            num_classes,
            max_len: m.max_len,
            vocab_size,
            routing: self.routing,
            loss: m.loss,
            init: m.init,
            seed: self.train.seed,
        }
    }
}
