//! Two-level logit distillation over class probabilities.
//!
//! The instance term is the mean KL divergence from teacher to student rows.
//! The class term compares the batch Gram matrices of class probabilities,
//! which capture cross-class co-activation structure the per-row KL misses.

use crate::tensor::{TensorError, Var};
use thiserror::Error;

/// Probability floor applied before logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum DistillError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

fn check_prob_batch(p: &Var<'_>, name: &str) -> Result<(usize, usize), DistillError> {
    let d = p.value();
    if d.shape.len() != 2 {
        return Err(DistillError::InvalidInput(format!("{name} must be rank-2 [B, C]")));
    }
    for r in 0..d.rows() {
        let sum: f64 = d.row(r).iter().sum();
        if (sum - 1.0).abs() > 1e-8 || d.row(r).iter().any(|&v| !(0.0..=1.0 + 1e-12).contains(&v)) {
            return Err(DistillError::InvalidInput(format!(
                "{name} row {r} is not a probability distribution (sum {sum})"
            )));
        }
    }
    Ok((d.rows(), d.cols()))
}

/// Mean over the batch of `KL(teacher_row || student_row)`.
pub fn ikd_loss<'t>(teacher: Var<'t>, student: Var<'t>) -> Result<Var<'t>, DistillError> {
    let (bt, ct) = check_prob_batch(&teacher, "teacher batch")?;
    let (bs, cs) = check_prob_batch(&student, "student batch")?;
    if (bt, ct) != (bs, cs) {
        return Err(DistillError::InvalidInput(format!(
            "shape mismatch: teacher [{bt}, {ct}] vs student [{bs}, {cs}]"
        )));
    }
    if student.value().values.iter().any(|&v| v < PROB_FLOOR) {
        eprintln!("warning: student probability below {PROB_FLOOR:.0e}, clamping before log");
    }
    let log_ratio = teacher.clamp_min(PROB_FLOOR).log().sub(student.clamp_min(PROB_FLOOR).log());
    Ok(teacher.mul(log_ratio).sum_all().scale(1.0 / bt as f64))
}

/// Batch-normalized class Gram matrix `M = (1/B) P^T P`.
pub fn class_relation<'t>(probs: Var<'t>) -> Result<Var<'t>, DistillError> {
    let (b, _) = check_prob_batch(&probs, "probability batch")?;
    Ok(probs.transpose().matmul(probs).scale(1.0 / b as f64))
}

/// Frobenius norm of the Gram difference, divided by the class count.
pub fn ckd_loss<'t>(teacher_m: Var<'t>, student_m: Var<'t>) -> Result<Var<'t>, DistillError> {
    let mt = teacher_m.value();
    let ms = student_m.value();
    if mt.shape != ms.shape || mt.shape.len() != 2 || mt.rows() != mt.cols() {
        return Err(DistillError::InvalidInput(format!(
            "relation matrices must share a square shape, got {:?} and {:?}",
            mt.shape, ms.shape
        )));
    }
    let c = mt.rows() as f64;
    let diff = teacher_m.sub(student_m);
    Ok(diff.mul(diff).sum_all().sqrt().scale(1.0 / c))
}

/// `L_HLD = L_ikd + L_ckd`.
pub fn hld_total<'t>(ikd: Var<'t>, ckd: Var<'t>) -> Var<'t> {
    ikd.add(ckd)
}
