//! Harness configuration.
//!
//! One TOML file carries the reward coefficients, objective settings, backend
//! connection, recorded training defaults, and paths. Every field has a
//! default, so an empty file (or no file) is valid.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::grpo::GrpoConfig;
use crate::rewards::RewardCoefficients;
use crate::rollout::BackendConfig;

/// Training-side defaults carried in the config for downstream trainers.
/// Nothing in this crate consumes them beyond serialization; they pin the
/// values a trainer should start from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingDefaults {
    pub optimizer: String,
    pub precision: String,
    pub distributed_training: String,
    pub sft_learning_rate: f64,
    pub sft_weight_decay: f64,
    pub sft_warmup_ratio: f64,
    pub sft_scheduler: String,
    pub sft_batch_size_per_gpu: u32,
    pub sft_gradient_accumulation: u32,
    pub sft_epochs: u32,
    pub grpo_learning_rate: f64,
    pub grpo_batch_size: u32,
    pub replay_buffer_size: u32,
    pub grpo_epochs: u32,
    /// Fraction of the corpus used for training splits.
    pub train_fraction: f64,
    pub sft_sample_count: u32,
    pub grpo_sample_count: u32,
    pub eval_sample_count: u32,
    pub split_seed: u64,
}

impl Default for TrainingDefaults {
    fn default() -> Self {
        Self {
            optimizer: "AdamW".to_string(),
            precision: "bfloat16".to_string(),
            distributed_training: "ZeRO-3 + offloaded optimizer".to_string(),
            sft_learning_rate: 2e-5,
            sft_weight_decay: 0.01,
            sft_warmup_ratio: 0.05,
            sft_scheduler: "cosine".to_string(),
            sft_batch_size_per_gpu: 4,
            sft_gradient_accumulation: 4,
            sft_epochs: 20,
            grpo_learning_rate: 1e-6,
            grpo_batch_size: 128,
            replay_buffer_size: 128,
            grpo_epochs: 3,
            train_fraction: 0.2,
            sft_sample_count: 1600,
            grpo_sample_count: 366,
            eval_sample_count: 6400,
            split_seed: 17,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    /// Episode working directory for crops.
    pub workdir: PathBuf,
    /// Exemplar manifest for the reference-retrieval tool.
    pub exemplar_manifest: Option<PathBuf>,
    /// Seed for deterministic exemplar selection.
    pub exemplar_seed: u64,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            workdir: PathBuf::from("work"),
            exemplar_manifest: None,
            exemplar_seed: 7,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HarnessConfig {
    pub rewards: RewardCoefficients,
    pub grpo: GrpoConfig,
    pub backend: BackendConfig,
    pub training: TrainingDefaults,
    pub paths: PathsConfig,
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("config: {0}")]
    Invalid(String),
}

impl HarnessConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let config: HarnessConfig = toml::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }

    /// Load from a path when given, defaults otherwise.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self, ConfigError> {
        match path {
            Some(path) => Self::load(path),
            None => Ok(Self::default()),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.rewards
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.grpo
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.backend.validate().map_err(ConfigError::Invalid)?;
        Ok(())
    }

    /// Short content hash identifying the exact configuration of a run.
    pub fn fingerprint(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))[..12].to_string()
    }
}
