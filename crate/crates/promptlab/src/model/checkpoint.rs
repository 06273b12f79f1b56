//! Versioned JSON checkpoints: config plus named flat parameter arrays.

use super::{DualEncoder, ModelConfig, PromptSet};
use crate::tensor::Data;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;
use thiserror::Error;

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint does not match config: {0}")]
    Mismatch(String),
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    config: ModelConfig,
    frozen: bool,
    params: Vec<ParamEntry>,
}

pub fn save_checkpoint(model: &DualEncoder, path: &Path) -> Result<(), CheckpointError> {
    let file = CheckpointFile {
        version: CHECKPOINT_VERSION,
        config: model.config.clone(),
        frozen: model.is_frozen(),
        params: model
            .params
            .iter()
            .map(|(name, data)| ParamEntry {
                name: name.to_string(),
                shape: data.shape.clone(),
                values: data.values.clone(),
            })
            .collect(),
    };
    fs::write(path, serde_json::to_vec(&file)?)?;
    Ok(())
}

/// Load a checkpoint, validating every parameter name and shape against the
/// layout implied by the stored config.
pub fn load_checkpoint(path: &Path) -> Result<DualEncoder, CheckpointError> {
    let bytes = fs::read(path)?;
    let file: CheckpointFile = serde_json::from_slice(&bytes)?;
    if file.version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version(file.version));
    }
    file.config
        .validate()
        .map_err(|e| CheckpointError::Mismatch(e.to_string()))?;

    let mut model = DualEncoder::new(file.config, 0);
    let expected: Vec<(String, Vec<usize>)> = model
        .params
        .iter()
        .map(|(n, d)| (n.to_string(), d.shape.clone()))
        .collect();
    if expected.len() != file.params.len() {
        return Err(CheckpointError::Mismatch(format!(
            "expected {} parameters, found {}",
            expected.len(),
            file.params.len()
        )));
    }
    for ((name, shape), entry) in expected.iter().zip(&file.params) {
        if name != &entry.name || shape != &entry.shape {
            return Err(CheckpointError::Mismatch(format!(
                "parameter {} with shape {:?}, expected {} with shape {:?}",
                entry.name, entry.shape, name, shape
            )));
        }
        if entry.shape.iter().product::<usize>() != entry.values.len() {
            return Err(CheckpointError::Mismatch(format!(
                "parameter {} value count {} does not match shape {:?}",
                entry.name,
                entry.values.len(),
                entry.shape
            )));
        }
    }
    for (slot, entry) in model
        .params
        .iter_mut()
        .zip(file.params)
        .map(|((_, d), e)| (d, e))
    {
        *slot = Data::new(entry.shape, entry.values);
    }
    model.set_frozen(file.frozen);
    Ok(model)
}

#[derive(Serialize, Deserialize)]
struct PromptFile {
    version: u32,
    visual: Vec<ParamEntry>,
    textual: Vec<ParamEntry>,
}

fn prompt_entries(blocks: &[Data], prefix: &str) -> Vec<ParamEntry> {
    blocks
        .iter()
        .enumerate()
        .map(|(i, d)| ParamEntry {
            name: format!("{prefix}{i}"),
            shape: d.shape.clone(),
            values: d.values.clone(),
        })
        .collect()
}

pub fn save_prompts(prompts: &PromptSet, path: &Path) -> Result<(), CheckpointError> {
    let file = PromptFile {
        version: CHECKPOINT_VERSION,
        visual: prompt_entries(&prompts.visual, "prompt.visual"),
        textual: prompt_entries(&prompts.textual, "prompt.textual"),
    };
    fs::write(path, serde_json::to_vec(&file)?)?;
    Ok(())
}

fn prompt_blocks(
    entries: Vec<ParamEntry>,
    config: &ModelConfig,
) -> Result<Vec<Data>, CheckpointError> {
    entries
        .into_iter()
        .map(|e| {
            if e.shape.len() != 2 || e.shape[1] != config.embed_dim {
                return Err(CheckpointError::Mismatch(format!(
                    "prompt block {} has shape {:?}, expected [_, {}]",
                    e.name, e.shape, config.embed_dim
                )));
            }
            if e.shape.iter().product::<usize>() != e.values.len() {
                return Err(CheckpointError::Mismatch(format!(
                    "prompt block {} value count does not match shape",
                    e.name
                )));
            }
            Ok(Data::new(e.shape, e.values))
        })
        .collect()
}

/// Load a prompt set, validating block shapes against the model config.
pub fn load_prompts(path: &Path, config: &ModelConfig) -> Result<PromptSet, CheckpointError> {
    let bytes = fs::read(path)?;
    let file: PromptFile = serde_json::from_slice(&bytes)?;
    if file.version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version(file.version));
    }
    if file.visual.len() != config.prompt_depth || file.textual.len() != config.prompt_depth {
        return Err(CheckpointError::Mismatch(format!(
            "{} visual / {} textual prompt blocks, expected {} each",
            file.visual.len(),
            file.textual.len(),
            config.prompt_depth
        )));
    }
    Ok(PromptSet {
        visual: prompt_blocks(file.visual, config)?,
        textual: prompt_blocks(file.textual, config)?,
    })
}
