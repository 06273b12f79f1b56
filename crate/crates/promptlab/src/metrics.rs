//! Evaluation, the harmonic-mean headline metric, and the CSV record format.

use crate::data::{B2NDataset, Sample};
use crate::model::{DualEncoder, ModelError, PromptSet};
use crate::tensor::{concat_rows, Data, Tape};
use serde::{Deserialize, Serialize};

/// Text embeddings for a class set, one row per class, as plain values.
pub fn encode_class_matrix(
    model: &DualEncoder,
    prompts: Option<&PromptSet>,
    dataset: &B2NDataset,
    class_ids: &[usize],
) -> Result<Data, ModelError> {
    if class_ids.is_empty() {
        return Err(ModelError::InvalidInput("empty class set".into()));
    }
    let tape = Tape::new();
    let prompt_vars = prompts.map(|p| p.leaves(&tape));
    let mut rows = Vec::with_capacity(class_ids.len());
    for &class in class_ids {
        let emb = model.encode_text(&tape, dataset.class_tokens(class), prompt_vars.as_ref())?;
        rows.push(emb.as_row());
    }
    Ok(concat_rows(&rows).value())
}

/// Predicted class index (position within the class matrix) for one sample.
pub fn classify(
    model: &DualEncoder,
    prompts: Option<&PromptSet>,
    sample: &Sample,
    class_matrix: &Data,
) -> Result<usize, ModelError> {
    let tape = Tape::new();
    let prompt_vars = prompts.map(|p| p.leaves(&tape));
    let stack = model.encode_image(&tape, &sample.image, prompt_vars.as_ref())?;
    let v = tape.leaf(class_matrix.clone());
    let p = model.predict(stack.embedding, v)?.value();
    let argmax = p
        .values
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite probabilities"))
        .map(|(i, _)| i)
        .expect("nonempty class set");
    Ok(argmax)
}

/// Top-1 accuracy of the (model, prompts) pair over `samples`, restricted to
/// the given class set. Input masking is never applied here.
pub fn evaluate(
    model: &DualEncoder,
    prompts: Option<&PromptSet>,
    dataset: &B2NDataset,
    class_ids: &[usize],
    samples: &[Sample],
) -> Result<f64, ModelError> {
    if samples.is_empty() {
        return Err(ModelError::InvalidInput("empty sample set".into()));
    }
    let class_matrix = encode_class_matrix(model, prompts, dataset, class_ids)?;
    let mut correct = 0;
    for sample in samples {
        let predicted = classify(model, prompts, sample, &class_matrix)?;
        if class_ids[predicted] == sample.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

/// `2ab / (a + b)`, defined as 0 when either accuracy is 0.
pub fn harmonic_mean(base: f64, novel: f64) -> f64 {
    assert!(base >= 0.0 && novel >= 0.0, "accuracies must be nonnegative");
    if base == 0.0 || novel == 0.0 {
        return 0.0;
    }
    2.0 * base * novel / (base + novel)
}

/// Loss components recorded once per epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLosses {
    pub epoch: usize,
    pub l_cls: f64,
    pub l_hld: f64,
    pub l_stp: f64,
    pub total: f64,
}

/// One benchmark outcome; serializes to one CSV row (loss curves excluded).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub config_hash: String,
    pub seed: u64,
    pub q: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub fif: bool,
    pub stp: bool,
    pub hld: bool,
    pub base_acc: f64,
    pub novel_acc: f64,
    pub hm: f64,
    pub epochs: usize,
    pub wall_ms: u64,
    #[serde(default)]
    pub losses: Vec<EpochLosses>,
}

pub const CSV_HEADER: &str =
    "config_hash,seed,q,lambda,gamma,fif,stp,hld,base_acc,novel_acc,hm,epochs,wall_ms";

impl MetricsRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.6},{:.6},{:.6},{},{},{},{:.6},{:.6},{:.6},{},{}",
            self.config_hash,
            self.seed,
            self.q,
            self.lambda,
            self.gamma,
            self.fif as u8,
            self.stp as u8,
            self.hld as u8,
            self.base_acc,
            self.novel_acc,
            self.hm,
            self.epochs,
            self.wall_ms
        )
    }

    /// The row with timing zeroed, for byte-identity comparisons.
    pub fn csv_row_timeless(&self) -> String {
        let mut r = self.clone();
        r.wall_ms = 0;
        r.csv_row()
    }

    pub fn parse_csv_row(line: &str) -> Option<MetricsRecord> {
        let parts: Vec<&str> = line.trim().split(',').collect();
        if parts.len() != 13 {
            return None;
        }
        Some(MetricsRecord {
            config_hash: parts[0].to_string(),
            seed: parts[1].parse().ok()?,
            q: parts[2].parse().ok()?,
            lambda: parts[3].parse().ok()?,
            gamma: parts[4].parse().ok()?,
            fif: parts[5] == "1",
            stp: parts[6] == "1",
            hld: parts[7] == "1",
            base_acc: parts[8].parse().ok()?,
            novel_acc: parts[9].parse().ok()?,
            hm: parts[10].parse().ok()?,
            epochs: parts[11].parse().ok()?,
            wall_ms: parts[12].parse().ok()?,
            losses: Vec::new(),
        })
    }
}
