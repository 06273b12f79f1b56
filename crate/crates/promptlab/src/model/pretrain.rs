//! Contrastive pretraining of the teacher on confound-free data.
//!
//! Both encoders are trained jointly with a symmetric image-to-text /
//! text-to-image objective over cosine similarities, until coarse-class
//! train accuracy reaches the floor. The returned model is frozen and plays
//! the role of the pretrained reference for every downstream loss.

use super::{DualEncoder, ModelConfig, ModelError};
use crate::data::B2NDataset;
use crate::metrics::{classify, encode_class_matrix};
use crate::optim::{Optimizer, OptimizerKind};
use crate::tensor::{concat_rows, Tape, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub accuracy_floor: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            max_epochs: 80,
            batch_size: 16,
            lr: 1.5e-3,
            accuracy_floor: 0.9,
            seed: 0,
        }
    }
}

/// Train a fresh dual encoder on the confound-free pretraining split and
/// freeze it. Fails if the accuracy floor is not reached in `max_epochs`.
pub fn pretrain_teacher(
    dataset: &B2NDataset,
    model_config: &ModelConfig,
    cfg: &PretrainConfig,
) -> Result<DualEncoder, ModelError> {
    if dataset.pretrain.is_empty() {
        return Err(ModelError::InvalidInput("pretraining split is empty".into()));
    }
    let mut model = DualEncoder::new(model_config.clone(), cfg.seed);
    let mut opt = Optimizer::new(OptimizerKind::Adam, cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let n_classes = dataset.classes.len();

    for epoch in 0..cfg.max_epochs {
        let mut order: Vec<usize> = (0..dataset.pretrain.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let tape = Tape::new();
            let vars = model.params.leaves(&tape);

            let mut image_rows: Vec<Var<'_>> = Vec::with_capacity(chunk.len());
            let mut labels = Vec::with_capacity(chunk.len());
            for &idx in chunk {
                let sample = &dataset.pretrain[idx];
                let stack = model.encode_image_with(&tape, &vars, &sample.image, None)?;
                image_rows.push(stack.embedding.as_row());
                labels.push(sample.label);
            }
            let mut text_rows: Vec<Var<'_>> = Vec::with_capacity(n_classes);
            for class in 0..n_classes {
                let emb = model.encode_text_with(&tape, &vars, dataset.class_tokens(class), None)?;
                text_rows.push(emb.as_row());
            }
            let z = concat_rows(&image_rows);
            let v = concat_rows(&text_rows);

            // cosine similarity matrix [B, C], softmaxed at the model
            // temperature in both directions
            let mut sim_rows = Vec::with_capacity(chunk.len());
            for b in 0..chunk.len() {
                sim_rows.push(z.row(b).cos_sim_rows(v)?.as_row());
            }
            let sims = concat_rows(&sim_rows);
            let tau = model.config.temperature;

            let img_probs = sims.softmax_rows(tau)?;
            let txt_probs = sims.transpose().softmax_rows(tau)?;
            let mut loss: Option<Var<'_>> = None;
            for (b, &label) in labels.iter().enumerate() {
                let li = img_probs
                    .slice_rows(b, 1)
                    .slice_cols(label, 1)
                    .clamp_min(1e-12)
                    .log();
                let lt = txt_probs
                    .slice_rows(label, 1)
                    .slice_cols(b, 1)
                    .clamp_min(1e-12)
                    .log();
                let term = li.add(lt).reshape(vec![]);
                loss = Some(match loss {
                    Some(acc) => acc.add(term),
                    None => term,
                });
            }
            let loss = loss.unwrap().scale(-0.5 / chunk.len() as f64);
            let grads = loss.backward()?;
            let named = vars.gradients(&grads);

            opt.begin_step();
            let params = model.params_mut()?;
            for ((name, param), (gname, grad)) in params.iter_mut().zip(&named) {
                debug_assert_eq!(name, gname);
                opt.update(name, param, grad);
            }
        }

        let acc = pretrain_accuracy(&model, dataset)?;
        if acc >= cfg.accuracy_floor {
            model.freeze();
            return Ok(model);
        }
        if epoch == cfg.max_epochs - 1 {
            return Err(ModelError::TrainingFailed(format!(
                "teacher reached {acc:.3} train accuracy after {} epochs, below floor {}",
                cfg.max_epochs, cfg.accuracy_floor
            )));
        }
    }
    unreachable!("loop either returns or fails on the last epoch")
}

fn pretrain_accuracy(model: &DualEncoder, dataset: &B2NDataset) -> Result<f64, ModelError> {
    let all_classes: Vec<usize> = (0..dataset.classes.len()).collect();
    let class_mat = encode_class_matrix(model, None, dataset, &all_classes)?;
    let mut correct = 0;
    for sample in &dataset.pretrain {
        let predicted = classify(model, None, sample, &class_mat)?;
        if all_classes[predicted] == sample.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / dataset.pretrain.len() as f64)
}
