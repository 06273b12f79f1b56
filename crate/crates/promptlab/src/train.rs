//! Prompt tuning against a frozen teacher with the combined objective
//! `L = L_cls + lambda * L_HLD + gamma * L_STP`, plus optional
//! attention-guided input masking.
//!
//! Only the prompt tokens receive updates. Everything the teacher produces
//! (per-layer features, class probabilities, text embeddings) is constant
//! per sample, so it is computed once up front and re-entered on each step's
//! tape as leaves; the backward sweep then only visits the student graph.

use crate::data::B2NDataset;
use crate::distill::{ckd_loss, class_relation, hld_total, ikd_loss, DistillError};
use crate::masking::{apply_mask, build_mask, extract_attention, MaskError};
use crate::metrics::{evaluate, harmonic_mean, EpochLosses, MetricsRecord};
use crate::model::{DualEncoder, Image, ModelError, PromptSet};
use crate::optim::{Optimizer, OptimizerKind};
use crate::tensor::{concat_rows, Data, Tape, TensorError, Var};
use crate::topology::{
    fuse_layers, make_triplets, sample_layer_weights, stp_text_loss, stp_total,
    stp_vision_loss, TopologyError,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("loss became non-finite at epoch {epoch}, step {step}; batch samples {batch:?}; components cls={cls} hld={hld} stp={stp}")]
    NanLoss {
        epoch: usize,
        step: usize,
        batch: Vec<usize>,
        cls: f64,
        hld: f64,
        stp: f64,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Distill(#[from] DistillError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Weights of the two distillation terms in the total objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda: f64,
    pub gamma: f64,
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return Err(TrainError::InvalidParameter(format!(
                "lambda must be a nonnegative finite number, got {}",
                self.lambda
            )));
        }
        if self.gamma < 0.0 || !self.gamma.is_finite() {
            return Err(TrainError::InvalidParameter(format!(
                "gamma must be a nonnegative finite number, got {}",
                self.gamma
            )));
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda: 1.0, gamma: 3.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    /// Mask threshold q in [0, 100]; the top q percent of teacher attention
    /// is erased from training images.
    pub mask_threshold: f64,
    pub fif: bool,
    pub stp: bool,
    pub hld: bool,
    /// Probability that masking is applied to a given batch.
    pub fif_prob: f64,
    /// Visual / textual prompt token counts.
    pub visual_prompts: usize,
    pub textual_prompts: usize,
    /// Gaussian fusion kernel over layers: center, width, per-step jitter.
    pub fusion_mu: f64,
    pub fusion_sigma: f64,
    pub fusion_jitter: f64,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 20,
            batch_size: 4,
            lr: 2.5e-3,
            optimizer: OptimizerKind::Sgd,
            mask_threshold: 30.0,
            fif: true,
            stp: true,
            hld: true,
            fif_prob: 1.0,
            visual_prompts: 4,
            textual_prompts: 4,
            fusion_mu: 2.5,
            fusion_sigma: 1.5,
            fusion_jitter: 0.5,
            seed: 0,
        }
    }
}

impl TrainOptions {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(0.0..=100.0).contains(&self.mask_threshold) {
            return Err(TrainError::InvalidParameter(format!(
                "mask_threshold must be in [0, 100], got {}",
                self.mask_threshold
            )));
        }
        if !(0.0..=1.0).contains(&self.fif_prob) {
            return Err(TrainError::InvalidParameter(format!(
                "fif_prob must be in [0, 1], got {}",
                self.fif_prob
            )));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidParameter("batch_size must be positive".into()));
        }
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(TrainError::InvalidParameter(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        if self.fusion_sigma <= 0.0 {
            return Err(TrainError::InvalidParameter(format!(
                "fusion_sigma must be positive, got {}",
                self.fusion_sigma
            )));
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub prompts: PromptSet,
    pub record: MetricsRecord,
}

/// Teacher-side constants for one training image variant.
struct TeacherView {
    /// Per-layer class-token features, each `[d]`.
    layer_feats: Vec<Data>,
    /// Class probabilities over the base set, `[C]`.
    probs: Data,
}

fn teacher_view(
    teacher: &DualEncoder,
    image: &Image,
    text_matrix: &Data,
) -> Result<TeacherView, TrainError> {
    let tape = Tape::new();
    let stack = teacher.encode_image(&tape, image, None)?;
    let v = tape.leaf(text_matrix.clone());
    let probs = teacher.predict(stack.embedding, v)?.value();
    Ok(TeacherView {
        layer_feats: stack.layer_feats.iter().map(|f| f.value()).collect(),
        probs,
    })
}

/// Tune a prompt set on the base split. `student` is the frozen backbone the
/// prompts attach to; `teacher` provides every distillation target. Both are
/// usually the same frozen model.
pub fn train_prompts(
    student: &DualEncoder,
    teacher: &DualEncoder,
    dataset: &B2NDataset,
    weights: &LossWeights,
    options: &TrainOptions,
) -> Result<TrainOutcome, TrainError> {
    weights.validate()?;
    options.validate()?;
    if !teacher.is_frozen() || !student.is_frozen() {
        return Err(TrainError::InvalidParameter(
            "both backbone and teacher must be frozen before prompt tuning".into(),
        ));
    }
    let start = std::time::Instant::now();
    let mut prompts = PromptSet::init(
        &student.config,
        options.visual_prompts,
        options.textual_prompts,
        options.seed,
    );
    let mut opt = Optimizer::new(options.optimizer, options.lr);

    // independent RNG streams so disabling one component never shifts the
    // randomness seen by the others
    let mut rng_data = ChaCha8Rng::seed_from_u64(options.seed.wrapping_add(0xda7a));
    let mut rng_fif = ChaCha8Rng::seed_from_u64(options.seed.wrapping_add(0xf1f0));
    let mut rng_fusion = ChaCha8Rng::seed_from_u64(options.seed.wrapping_add(0xf05e));

    // labels are global class ids; losses want positions within the base set
    let base = &dataset.base_classes;
    let label_pos = |label: usize| {
        base.iter().position(|&c| c == label).expect("training label is a base class")
    };

    // teacher text embeddings over the base set, constant throughout
    let teacher_text: Data = {
        let tape = Tape::new();
        let vars = teacher.params.leaves(&tape);
        let rows = base
            .iter()
            .map(|&c| {
                Ok(teacher.encode_text_with(&tape, &vars, dataset.class_tokens(c), None)?.as_row())
            })
            .collect::<Result<Vec<_>, ModelError>>()?;
        concat_rows(&rows).value()
    };

    // masks depend only on the frozen teacher and the clean image, so every
    // teacher-side view is computed once per training sample
    let masked_images: Vec<Option<Image>> = dataset
        .train_base
        .iter()
        .map(|s| {
            if !options.fif {
                return Ok(None);
            }
            let attn = extract_attention(teacher, &s.image)?;
            let mask = build_mask(&attn, options.mask_threshold)?;
            apply_mask(&mask, &s.image).map(Some)
        })
        .collect::<Result<_, MaskError>>()?;
    let needs_clean = !options.fif || options.fif_prob < 1.0;
    let mut teacher_masked = Vec::with_capacity(dataset.train_base.len());
    let mut teacher_clean = Vec::with_capacity(dataset.train_base.len());
    for (sample, masked) in dataset.train_base.iter().zip(&masked_images) {
        teacher_masked.push(match masked {
            Some(img) => Some(teacher_view(teacher, img, &teacher_text)?),
            None => None,
        });
        teacher_clean.push(if needs_clean {
            Some(teacher_view(teacher, &sample.image, &teacher_text)?)
        } else {
            None
        });
    }

    let mut losses = Vec::with_capacity(options.epochs);
    for epoch in 0..options.epochs {
        let mut order: Vec<usize> = (0..dataset.train_base.len()).collect();
        order.shuffle(&mut rng_data);
        let mut sums = (0.0, 0.0, 0.0, 0.0);
        let mut steps = 0usize;
        for (step, chunk) in order.chunks(options.batch_size).enumerate() {
            let use_fif = options.fif && rng_fif.gen_range(0.0..1.0) < options.fif_prob;
            let fusion = sample_layer_weights(
                student.config.layers,
                options.fusion_mu,
                options.fusion_sigma,
                options.fusion_jitter,
                &mut rng_fusion,
            );

            let tape = Tape::new();
            let prompt_vars = prompts.leaves(&tape);
            let param_vars = student.params.leaves(&tape);

            let v_teacher = tape.leaf(teacher_text.clone());
            let student_text_rows = base
                .iter()
                .map(|&c| {
                    Ok(student
                        .encode_text_with(&tape, &param_vars, dataset.class_tokens(c), Some(&prompt_vars))?
                        .as_row())
                })
                .collect::<Result<Vec<_>, ModelError>>()?;
            let v_student = concat_rows(&student_text_rows);

            // teacher and student see the identical (possibly masked) input
            let mut labels = Vec::with_capacity(chunk.len());
            let mut teacher_fused = Vec::with_capacity(chunk.len());
            let mut student_fused = Vec::with_capacity(chunk.len());
            let mut teacher_probs = Vec::with_capacity(chunk.len());
            let mut student_probs = Vec::with_capacity(chunk.len());
            for &idx in chunk {
                let sample = &dataset.train_base[idx];
                let (image, view) = if use_fif {
                    (
                        masked_images[idx].as_ref().expect("masked image present"),
                        teacher_masked[idx].as_ref().expect("masked view present"),
                    )
                } else {
                    (&sample.image, teacher_clean[idx].as_ref().expect("clean view present"))
                };
                let s_stack = student.encode_image_with(&tape, &param_vars, image, Some(&prompt_vars))?;
                labels.push(label_pos(sample.label));
                if options.stp {
                    let t_feats: Vec<Var<'_>> =
                        view.layer_feats.iter().map(|f| tape.leaf(f.clone())).collect();
                    teacher_fused.push(fuse_layers(&t_feats, &fusion)?);
                    student_fused.push(fuse_layers(&s_stack.layer_feats, &fusion)?);
                }
                teacher_probs.push(tape.leaf(view.probs.clone()));
                student_probs.push(student.predict(s_stack.embedding, v_student)?);
            }

            let l_cls = crate::model::cross_entropy_loss(&student_probs, &labels)?;

            let l_hld = if options.hld {
                let t_rows: Vec<Var<'_>> = teacher_probs.iter().map(|p| p.as_row()).collect();
                let s_rows: Vec<Var<'_>> = student_probs.iter().map(|p| p.as_row()).collect();
                let p_t = concat_rows(&t_rows);
                let p_s = concat_rows(&s_rows);
                let ikd = ikd_loss(p_t, p_s)?;
                let ckd = ckd_loss(class_relation(p_t)?, class_relation(p_s)?)?;
                Some(hld_total(ikd, ckd))
            } else {
                None
            };

            let l_stp = if options.stp {
                let triplets = make_triplets(chunk.len(), &mut rng_fusion);
                let (vision, _skipped) =
                    stp_vision_loss(&tape, &teacher_fused, &student_fused, &triplets)?;
                let text = stp_text_loss(v_teacher, v_student)?;
                Some(stp_total(vision, text))
            } else {
                None
            };

            let mut total = l_cls;
            if let Some(hld) = l_hld {
                total = total.add(hld.scale(weights.lambda));
            }
            if let Some(stp) = l_stp {
                total = total.add(stp.scale(weights.gamma));
            }

            let cls_v = l_cls.scalar_value();
            let hld_v = l_hld.map_or(0.0, |v| v.scalar_value());
            let stp_v = l_stp.map_or(0.0, |v| v.scalar_value());
            let total_v = total.scalar_value();
            if !total_v.is_finite() {
                return Err(TrainError::NanLoss {
                    epoch,
                    step,
                    batch: chunk.to_vec(),
                    cls: cls_v,
                    hld: hld_v,
                    stp: stp_v,
                });
            }

            let grads = total.backward()?;
            opt.begin_step();
            for ((name, param), var) in prompts
                .iter_mut()
                .zip(prompt_vars.visual.iter().chain(prompt_vars.textual.iter()))
            {
                let grad = grads.get(*var);
                opt.update(&name, param, &grad);
            }

            sums.0 += cls_v;
            sums.1 += hld_v;
            sums.2 += stp_v;
            sums.3 += total_v;
            steps += 1;
        }
        let n = steps.max(1) as f64;
        losses.push(EpochLosses {
            epoch,
            l_cls: sums.0 / n,
            l_hld: sums.1 / n,
            l_stp: sums.2 / n,
            total: sums.3 / n,
        });
    }

    let tuned = Some(&prompts);
    let base_acc = evaluate(student, tuned, dataset, &dataset.base_classes, &dataset.test_base)?;
    let novel_acc =
        evaluate(student, tuned, dataset, &dataset.novel_classes, &dataset.test_novel)?;
    let record = MetricsRecord {
        config_hash: String::new(),
        seed: options.seed,
        q: options.mask_threshold,
        lambda: weights.lambda,
        gamma: weights.gamma,
        fif: options.fif,
        stp: options.stp,
        hld: options.hld,
        base_acc,
        novel_acc,
        hm: harmonic_mean(base_acc, novel_acc),
        epochs: options.epochs,
        wall_ms: start.elapsed().as_millis() as u64,
        losses,
    };
    Ok(TrainOutcome { prompts, record })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_b2n, DataConfig};
    use crate::model::ModelConfig;

    fn tiny_setup() -> (DualEncoder, B2NDataset) {
        let cfg = ModelConfig { image_size: 16, ..ModelConfig::tiny() };
        let data_cfg = DataConfig {
            n_classes: 4,
            train_per_class: 2,
            test_per_class: 2,
            pretrain_per_class: 2,
            image_size: cfg.image_size,
            ..DataConfig::default()
        };
        let dataset = generate_b2n(&data_cfg, 3).unwrap();
        let mut model = DualEncoder::new(cfg, 3);
        model.freeze();
        (model, dataset)
    }

    fn quick_options(epochs: usize) -> TrainOptions {
        TrainOptions {
            epochs,
            visual_prompts: 1,
            textual_prompts: 1,
            optimizer: OptimizerKind::Adam,
            ..TrainOptions::default()
        }
    }

    #[test]
    fn rejects_unfrozen_models_and_bad_weights() {
        let (model, dataset) = tiny_setup();
        let mut thawed = model.clone();
        thawed.set_frozen(false);
        let opts = quick_options(1);
        assert!(train_prompts(&thawed, &model, &dataset, &LossWeights::default(), &opts).is_err());

        let bad = LossWeights { lambda: -1.0, gamma: 3.0 };
        let err = train_prompts(&model, &model, &dataset, &bad, &opts).unwrap_err();
        assert!(err.to_string().contains("lambda"), "{err}");

        let mut bad_opts = quick_options(1);
        bad_opts.mask_threshold = 120.0;
        assert!(train_prompts(&model, &model, &dataset, &LossWeights::default(), &bad_opts).is_err());
    }

    #[test]
    fn zero_epochs_leaves_prompts_at_init() {
        let (model, dataset) = tiny_setup();
        let opts = quick_options(0);
        let out =
            train_prompts(&model, &model, &dataset, &LossWeights::default(), &opts).unwrap();
        let init = PromptSet::init(&model.config, 1, 1, opts.seed);
        assert_eq!(out.prompts, init);
        assert!(out.record.losses.is_empty());
    }

    #[test]
    fn training_is_deterministic_in_seed() {
        let (model, dataset) = tiny_setup();
        let opts = quick_options(2);
        let a = train_prompts(&model, &model, &dataset, &LossWeights::default(), &opts).unwrap();
        let b = train_prompts(&model, &model, &dataset, &LossWeights::default(), &opts).unwrap();
        assert_eq!(a.prompts, b.prompts);
        assert_eq!(a.record.csv_row_timeless(), b.record.csv_row_timeless());
        assert_eq!(a.record.losses, b.record.losses);
    }

    #[test]
    fn zero_weights_match_disabled_components() {
        let (model, dataset) = tiny_setup();
        let zeroed = LossWeights { lambda: 0.0, gamma: 0.0 };
        let on = quick_options(2);
        let off = TrainOptions { stp: false, hld: false, ..on.clone() };
        let a = train_prompts(&model, &model, &dataset, &zeroed, &on).unwrap();
        let b = train_prompts(&model, &model, &dataset, &zeroed, &off).unwrap();
        assert_eq!(a.prompts, b.prompts, "zero-weight terms must not move the prompts");
        for (la, lb) in a.record.losses.iter().zip(&b.record.losses) {
            assert!((la.l_cls - lb.l_cls).abs() < 1e-12);
        }
    }

    #[test]
    fn recorded_totals_decompose_exactly() {
        let (model, dataset) = tiny_setup();
        let weights = LossWeights { lambda: 0.7, gamma: 1.3 };
        let out = train_prompts(&model, &model, &dataset, &weights, &quick_options(2)).unwrap();
        for e in &out.record.losses {
            let recomposed = e.l_cls + weights.lambda * e.l_hld + weights.gamma * e.l_stp;
            assert!(
                (e.total - recomposed).abs() < 1e-10,
                "epoch {}: total {} vs {}",
                e.epoch,
                e.total,
                recomposed
            );
        }
    }

    #[test]
    fn teacher_parameters_are_untouched() {
        let (model, dataset) = tiny_setup();
        let before: Vec<Data> = model.params.iter().map(|(_, d)| d.clone()).collect();
        train_prompts(&model, &model, &dataset, &LossWeights::default(), &quick_options(1))
            .unwrap();
        let after: Vec<Data> = model.params.iter().map(|(_, d)| d.clone()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn training_reduces_classification_loss() {
        let (model, dataset) = tiny_setup();
        let opts = quick_options(8);
        let out =
            train_prompts(&model, &model, &dataset, &LossWeights::default(), &opts).unwrap();
        let first = out.record.losses.first().unwrap().l_cls;
        let last = out.record.losses.last().unwrap().l_cls;
        assert!(last < first, "l_cls did not decrease: {first} -> {last}");
    }
}
