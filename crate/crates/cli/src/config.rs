//! Experiment configuration files.

use std::fs;
use std::path::{Path, PathBuf};

use fgrm_core::metrics::MetricSettings;
use fgrm_core::model::ModelConfig;
use fgrm_core::scenes::SceneSpec;
use fgrm_core::train::PretrainConfig;
use fgrm_core::tuner::{RewardMode, TunerConfig};
use fgrm_core::CoreError;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, RunError};

/// Overrides `output_dir` when set.
pub const OUTPUT_ROOT_ENV: &str = "FGRM_OUTPUT_ROOT";

/// Top-level sections are required so that an omitted one is reported by
/// name; fields inside each section fall back to their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scene: SceneSpec,
    /// Total number of generated scenes before splitting.
    pub dataset_size: usize,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub tuner: TunerConfig,
    pub metrics: MetricSettings,
    pub output_dir: PathBuf,
    /// Copied into every nested seed.
    pub seed: u64,
    /// Directory with `images/` and `masks/` PGM files to use instead of
    /// synthetic scenes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub paired_data: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scene: SceneSpec::default(),
            dataset_size: 782,
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            tuner: TunerConfig::default(),
            metrics: MetricSettings::default(),
            output_dir: PathBuf::from("runs/default"),
            seed: 0,
            paired_data: None,
        }
    }
}

impl ExperimentConfig {
    /// Settings tuned for the 32×32 synthetic scenes: a faster pretraining
    /// rate, with the tuner defaults for the ID reward.
    pub fn toy(seed: u64) -> Self {
        let mut cfg = Self {
            seed,
            ..Self::default()
        };
        cfg.pretrain.optimizer.lr = 2e-3;
        cfg.propagate_seed();
        cfg
    }

    /// Tuner settings used for the OOD reward on the toy scenes.
    pub fn toy_ood_tuner(seed: u64) -> TunerConfig {
        TunerConfig {
            reward: RewardMode::Ood,
            lr: 2e-2,
            beta: 3.0,
            epochs: 24,
            samples: 8,
            seed,
            ..TunerConfig::default()
        }
    }

    pub fn propagate_seed(&mut self) {
        self.scene.seed = self.seed;
        self.model.seed = self.seed;
        self.pretrain.seed = self.seed;
        self.tuner.seed = self.seed;
    }

    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        let mut cfg: Self = serde_json::from_str(text).map_err(|e| RunError::ConfigParse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        cfg.propagate_seed();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads, validates, and applies the output-root override.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| RunError::io(path, e))?;
        let mut cfg = Self::from_json(&text, path)?;
        if let Some(root) = std::env::var_os(OUTPUT_ROOT_ENV) {
            cfg.output_dir = PathBuf::from(root);
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config is plain data")
    }

    pub fn validate(&self) -> Result<(), CoreError> {
        self.scene.validate()?;
        self.model.validate()?;
        self.pretrain.validate()?;
        self.tuner.validate()?;
        self.metrics.validate()?;
        if self.paired_data.is_none() {
            if self.scene.height != self.model.height || self.scene.width != self.model.width {
                return Err(CoreError::config("model.height/width", "must match scene.height/width"));
            }
            if self.scene.classes != self.model.classes {
                return Err(CoreError::config("model.classes", "must match scene.classes"));
            }
            if self.scene.channels != self.model.in_channels {
                return Err(CoreError::config("model.in_channels", "must match scene.channels"));
            }
        } else if self.model.in_channels != 1 {
            return Err(CoreError::config("model.in_channels", "paired PGM data is single-channel"));
        }
        if self.dataset_size < 10 {
            return Err(CoreError::config("dataset_size", "must be at least 10"));
        }
        if !self.model.height.is_multiple_of(self.metrics.patch) || !self.model.width.is_multiple_of(self.metrics.patch) {
            return Err(CoreError::config("metrics.patch", "must divide the image height and width"));
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON, ignoring where outputs go.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output_dir = PathBuf::new();
        let bytes = serde_json::to_vec(&canonical).expect("config is plain data");
        hex::encode(Sha256::digest(bytes))
    }
}
