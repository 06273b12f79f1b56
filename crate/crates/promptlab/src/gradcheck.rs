//! A registry of every loss surface in the crate, each verified against
//! central finite differences at randomly drawn points.
//!
//! Each case differentiates one leaf (prompt tokens for the model-level
//! losses, raw feature or logit matrices for the standalone ones) and
//! reports the worst relative error over coordinates and seeds.

use crate::distill::{ckd_loss, class_relation, ikd_loss};
use crate::model::{cross_entropy_loss, DualEncoder, Image, ModelConfig, PromptVars};
use crate::tensor::{concat_rows, finite_diff_check, Data, Var};
use crate::topology::{make_triplets, stp_text_loss, stp_vision_loss, TripletSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Step size for central differences.
pub const FD_STEP: f64 = 1e-5;

/// Maximum tolerated relative error.
pub const FD_TOLERANCE: f64 = 1e-4;

/// Seeds exercised per case.
pub const FD_SEEDS: u64 = 10;

/// Outcome of one registry case across all seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub name: &'static str,
    pub module: &'static str,
    pub seeds: u64,
    pub max_rel_err: f64,
    pub passed: bool,
}

fn random_data(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Data {
    let n: usize = shape.iter().product::<usize>().max(1);
    Data::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

fn random_image(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Image {
    let s = cfg.image_size;
    Image::new(Data::new(
        vec![3, s, s],
        (0..3 * s * s).map(|_| rng.gen_range(0.0..1.0)).collect(),
    ))
}

/// A small frozen model shared by the model-level cases.
fn probe_model(seed: u64) -> DualEncoder {
    let mut model = DualEncoder::new(ModelConfig::tiny(), seed);
    model.freeze();
    model
}

fn prompt_vars<'t>(visual: Var<'t>, textual: Var<'t>) -> PromptVars<'t> {
    PromptVars { visual: vec![visual], textual: vec![textual] }
}

/// Classification loss as a function of the visual prompt block.
fn case_cls(seed: u64) -> f64 {
    let model = probe_model(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(100));
    let d = model.config.embed_dim;
    let image = random_image(&model.config, &mut rng);
    let textual = random_data(vec![2, d], &mut rng);
    let x = random_data(vec![2, d], &mut rng);
    finite_diff_check(
        |tape, v| {
            let t_leaf = tape.leaf(textual.clone());
            let prompts = prompt_vars(v, t_leaf);
            let stack = model.encode_image(tape, &image, Some(&prompts)).unwrap();
            let rows: Vec<Var<'_>> = (0..2)
                .map(|c| {
                    model
                        .encode_text(tape, &[1, 2 + c], Some(&prompts))
                        .unwrap()
                        .as_row()
                })
                .collect();
            let classes = concat_rows(&rows);
            let probs = model.predict(stack.embedding, classes).unwrap();
            cross_entropy_loss(&[probs], &[0]).unwrap()
        },
        &x,
        FD_STEP,
    )
}

/// Triplet-angle loss as a function of the student point cloud `[B, d]`.
fn case_stp_vision(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(200));
    let b = 4;
    let d = 5;
    let teacher = random_data(vec![b, d], &mut rng);
    let triplets: TripletSet = make_triplets(b, &mut rng);
    let x = random_data(vec![b, d], &mut rng);
    finite_diff_check(
        |tape, v| {
            let t = tape.leaf(teacher.clone());
            let t_pts: Vec<Var<'_>> = (0..b).map(|i| t.row(i)).collect();
            let s_pts: Vec<Var<'_>> = (0..b).map(|i| v.row(i)).collect();
            stp_vision_loss(tape, &t_pts, &s_pts, &triplets).unwrap().0
        },
        &x,
        FD_STEP,
    )
}

/// Text alignment loss as a function of the student text matrix.
fn case_stp_text(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(300));
    let teacher = random_data(vec![3, 6], &mut rng);
    let x = random_data(vec![3, 6], &mut rng);
    finite_diff_check(
        |tape, v| stp_text_loss(tape.leaf(teacher.clone()), v).unwrap(),
        &x,
        FD_STEP,
    )
}

fn random_prob_rows(b: usize, c: usize, rng: &mut ChaCha8Rng) -> Data {
    let mut values = Vec::with_capacity(b * c);
    for _ in 0..b {
        let raw: Vec<f64> = (0..c).map(|_| rng.gen_range(0.1..1.0)).collect();
        let sum: f64 = raw.iter().sum();
        values.extend(raw.iter().map(|v| v / sum));
    }
    Data::matrix(b, c, values)
}

/// Instance distillation as a function of student logits (softmaxed inside
/// the case, so probability constraints hold at every probe point).
fn case_ikd(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(400));
    let teacher = random_prob_rows(4, 3, &mut rng);
    let x = random_data(vec![4, 3], &mut rng);
    finite_diff_check(
        |tape, v| {
            let probs = v.softmax_rows(1.0).unwrap();
            ikd_loss(tape.leaf(teacher.clone()), probs).unwrap()
        },
        &x,
        FD_STEP,
    )
}

/// Class-relation distillation as a function of student logits.
fn case_ckd(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(500));
    let teacher = random_prob_rows(4, 3, &mut rng);
    let x = random_data(vec![4, 3], &mut rng);
    finite_diff_check(
        |tape, v| {
            let probs = v.softmax_rows(1.0).unwrap();
            let mt = class_relation(tape.leaf(teacher.clone())).unwrap();
            let ms = class_relation(probs).unwrap();
            ckd_loss(mt, ms).unwrap()
        },
        &x,
        FD_STEP,
    )
}

/// The combined objective (classification + both distillation terms +
/// topology) as a function of the visual prompt block.
fn case_total(seed: u64) -> f64 {
    let model = probe_model(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(600));
    let d = model.config.embed_dim;
    let b = 3;
    let images: Vec<Image> = (0..b).map(|_| random_image(&model.config, &mut rng)).collect();
    let labels: Vec<usize> = (0..b).map(|i| i % 2).collect();
    let textual = random_data(vec![2, d], &mut rng);
    let triplets = make_triplets(b, &mut rng);
    let x = random_data(vec![2, d], &mut rng);
    finite_diff_check(
        |tape, v| {
            let t_leaf = tape.leaf(textual.clone());
            let prompts = prompt_vars(v, t_leaf);

            let t_rows: Vec<Var<'_>> = (0..2)
                .map(|c| model.encode_text(tape, &[1, 2 + c], None).unwrap().as_row())
                .collect();
            let v_teacher = concat_rows(&t_rows);
            let s_rows: Vec<Var<'_>> = (0..2)
                .map(|c| {
                    model
                        .encode_text(tape, &[1, 2 + c], Some(&prompts))
                        .unwrap()
                        .as_row()
                })
                .collect();
            let v_student = concat_rows(&s_rows);

            let mut t_probs = Vec::new();
            let mut s_probs = Vec::new();
            let mut t_emb = Vec::new();
            let mut s_emb = Vec::new();
            for image in &images {
                let t_stack = model.encode_image(tape, image, None).unwrap();
                let s_stack = model.encode_image(tape, image, Some(&prompts)).unwrap();
                t_probs.push(model.predict(t_stack.embedding, v_teacher).unwrap());
                s_probs.push(model.predict(s_stack.embedding, v_student).unwrap());
                t_emb.push(t_stack.embedding);
                s_emb.push(s_stack.embedding);
            }

            let cls = cross_entropy_loss(&s_probs, &labels).unwrap();
            let tp_rows: Vec<Var<'_>> = t_probs.iter().map(|p| p.as_row()).collect();
            let sp_rows: Vec<Var<'_>> = s_probs.iter().map(|p| p.as_row()).collect();
            let p_t = concat_rows(&tp_rows);
            let p_s = concat_rows(&sp_rows);
            let ikd = ikd_loss(p_t, p_s).unwrap();
            let ckd = ckd_loss(
                class_relation(p_t).unwrap(),
                class_relation(p_s).unwrap(),
            )
            .unwrap();
            let (vision, _) = stp_vision_loss(tape, &t_emb, &s_emb, &triplets).unwrap();
            let text = stp_text_loss(v_teacher, v_student).unwrap();

            cls.add(ikd.add(ckd).scale(1.0))
                .add(vision.add(text).scale(3.0))
        },
        &x,
        FD_STEP,
    )
}

type CaseFn = fn(u64) -> f64;

const CASES: [(&str, &str, CaseFn); 6] = [
    ("classification", "model", case_cls),
    ("topology-vision", "topology", case_stp_vision),
    ("topology-text", "topology", case_stp_text),
    ("distill-instance", "distill", case_ikd),
    ("distill-relation", "distill", case_ckd),
    ("combined-objective", "train", case_total),
];

pub fn case_names() -> Vec<&'static str> {
    CASES.iter().map(|(n, _, _)| *n).collect()
}

/// Run every case whose module matches `scope` ("all" runs everything),
/// `seeds` seeds each.
pub fn run_gradchecks(scope: &str, seeds: u64) -> Vec<GradCheckReport> {
    CASES
        .iter()
        .filter(|(_, module, _)| scope == "all" || scope == *module)
        .map(|(name, module, case)| {
            let mut worst = 0.0_f64;
            for seed in 0..seeds {
                worst = worst.max(case(seed));
            }
            GradCheckReport {
                name,
                module,
                seeds,
                max_rel_err: worst,
                passed: worst < FD_TOLERANCE,
            }
        })
        .collect()
}

/// A deliberately broken gradient (one factor detached from the tape), to
/// show the checker rejects corrupted derivatives.
pub fn negative_control_rel_err() -> f64 {
    let x = Data::vector(vec![0.7, -1.3, 0.4]);
    finite_diff_check(
        |tape, v| {
            let detached = tape.leaf(v.value());
            v.mul(detached).sum_all()
        },
        &x,
        FD_STEP,
    )
}
