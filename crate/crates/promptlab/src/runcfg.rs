//! One TOML file describing a full run: model, data, teacher pretraining,
//! prompt tuning, and loss weights.
//!
//! The top-level `seed` drives everything downstream (dataset generation,
//! teacher initialization, prompt tuning); the per-section seeds are
//! overridden by it when a run is orchestrated through [`crate::bench`].

use crate::data::DataConfig;
use crate::model::pretrain::PretrainConfig;
use crate::model::ModelConfig;
use crate::train::{LossWeights, TrainOptions};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;
use thiserror::Error;

/// Environment variable naming the default output directory root.
pub const OUT_ROOT_ENV: &str = "PROMPTLAB_OUT";

#[derive(Debug, Error)]
pub enum RunConfigError {
    #[error("failed to read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("failed to parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainOptions,
    pub loss: LossWeights,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            model: ModelConfig::default(),
            data: DataConfig::default(),
            pretrain: PretrainConfig::default(),
            train: TrainOptions::default(),
            loss: LossWeights::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, RunConfigError> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, RunConfigError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }

    /// Persist the fully resolved config next to a run's outputs.
    pub fn save(&self, path: &Path) -> Result<(), RunConfigError> {
        std::fs::write(path, self.to_toml_string())?;
        Ok(())
    }

    /// Every check names the offending key so a bad file is quick to fix.
    pub fn validate(&self) -> Result<(), RunConfigError> {
        self.model
            .validate()
            .map_err(|e| RunConfigError::Invalid(format!("model: {e}")))?;
        if self.data.n_classes < 4 || self.data.n_classes % 2 != 0 {
            return Err(RunConfigError::Invalid(format!(
                "data.n_classes must be even and at least 4, got {}",
                self.data.n_classes
            )));
        }
        if !(0.0..=1.0).contains(&self.data.rho) {
            return Err(RunConfigError::Invalid(format!(
                "data.rho must be in [0, 1], got {}",
                self.data.rho
            )));
        }
        if self.data.image_size != self.model.image_size {
            return Err(RunConfigError::Invalid(format!(
                "data.image_size ({}) must equal model.image_size ({})",
                self.data.image_size, self.model.image_size
            )));
        }
        if self.pretrain.lr <= 0.0 {
            return Err(RunConfigError::Invalid(format!(
                "pretrain.lr must be positive, got {}",
                self.pretrain.lr
            )));
        }
        if !(0.0..=1.0).contains(&self.pretrain.accuracy_floor) {
            return Err(RunConfigError::Invalid(format!(
                "pretrain.accuracy_floor must be in [0, 1], got {}",
                self.pretrain.accuracy_floor
            )));
        }
        if self.pretrain.batch_size == 0 {
            return Err(RunConfigError::Invalid(
                "pretrain.batch_size must be positive".into(),
            ));
        }
        self.loss
            .validate()
            .map_err(|e| RunConfigError::Invalid(format!("loss: {e}")))?;
        self.train
            .validate()
            .map_err(|e| RunConfigError::Invalid(format!("train: {e}")))?;
        Ok(())
    }

    /// Short hash of the resolved configuration, stable across runs.
    pub fn config_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.to_toml_string().as_bytes());
        let digest = hasher.finalize();
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// Output root: `$PROMPTLAB_OUT` if set, otherwise `./runs`.
pub fn default_out_root() -> std::path::PathBuf {
    std::env::var_os(OUT_ROOT_ENV)
        .map(std::path::PathBuf::from)
        .unwrap_or_else(|| std::path::PathBuf::from("runs"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml_string();
        let back = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.config_hash(), back.config_hash());
    }

    #[test]
    fn partial_file_fills_in_defaults() {
        let cfg = RunConfig::from_toml_str("seed = 7\n[loss]\nlambda = 2.0\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.loss.lambda, 2.0);
        assert_eq!(cfg.loss.gamma, LossWeights::default().gamma);
        assert_eq!(cfg.model, ModelConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml_str("sead = 7\n").is_err());
        assert!(RunConfig::from_toml_str("[loss]\nlamda = 1.0\n").is_err());
    }

    #[test]
    fn errors_name_the_offending_key() {
        let err = RunConfig::from_toml_str("[loss]\nlambda = -0.5\n").unwrap_err();
        assert!(err.to_string().contains("lambda"), "{err}");
        let err = RunConfig::from_toml_str("[data]\nrho = 1.5\n").unwrap_err();
        assert!(err.to_string().contains("data.rho"), "{err}");
        let err = RunConfig::from_toml_str("[train]\nmask_threshold = -3.0\n").unwrap_err();
        assert!(err.to_string().contains("mask_threshold"), "{err}");
    }

    #[test]
    fn mismatched_image_sizes_are_rejected() {
        let err = RunConfig::from_toml_str("[data]\nimage_size = 16\n").unwrap_err();
        assert!(err.to_string().contains("image_size"), "{err}");
    }

    #[test]
    fn hash_is_sensitive_to_any_field() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.train.mask_threshold = 31.0;
        assert_ne!(a.config_hash(), b.config_hash());
        assert_eq!(a.config_hash().len(), 16);
    }
}
