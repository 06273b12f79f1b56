//! Architecture hyperparameters for the miniature dual encoder.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("invalid model config: {0}")]
    Invalid(String),
}

/// Desk-scale defaults mirror a shrunken ViT: 32x32x3 images, 4x4 patches,
/// four transformer layers of width 64 with four heads, prompts injected in
/// the first two layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub patch_size: usize,
    pub image_size: usize,
    pub vocab_size: usize,
    pub max_text_len: usize,
    pub temperature: f64,
    pub prompt_depth: usize,
    pub mlp_ratio: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 64,
            layers: 4,
            heads: 4,
            patch_size: 4,
            image_size: 32,
            vocab_size: 64,
            max_text_len: 8,
            temperature: 0.07,
            prompt_depth: 2,
            mlp_ratio: 2,
        }
    }
}

impl ModelConfig {
    /// A tiny configuration for fast tests and gradient checks.
    pub fn tiny() -> Self {
        ModelConfig {
            embed_dim: 8,
            layers: 2,
            heads: 2,
            patch_size: 4,
            image_size: 8,
            vocab_size: 16,
            max_text_len: 4,
            temperature: 0.07,
            prompt_depth: 1,
            mlp_ratio: 2,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.image_size == 0 || self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(ConfigError::Invalid(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(ConfigError::Invalid(format!(
                "embed_dim {} must be divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.prompt_depth > self.layers {
            return Err(ConfigError::Invalid(format!(
                "prompt_depth {} exceeds layer count {}",
                self.prompt_depth, self.layers
            )));
        }
        if self.temperature <= 0.0 {
            return Err(ConfigError::Invalid(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.layers == 0 || self.embed_dim == 0 || self.vocab_size == 0 || self.max_text_len == 0
        {
            return Err(ConfigError::Invalid(
                "layers, embed_dim, vocab_size and max_text_len must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn patches_per_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        self.patches_per_side() * self.patches_per_side()
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn mlp_hidden(&self) -> usize {
        self.mlp_ratio * self.embed_dim
    }
}
