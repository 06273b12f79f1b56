//! Triplet-angle topology preservation.
//!
//! Teacher and student image features are fused across layers with shared
//! Gaussian weights, every ordered triple of batch indices contributes the
//! cosine of the angle at its middle vertex, and the loss is the mean
//! absolute gap between teacher and student angles. Angles are invariant
//! under rotation, translation, and uniform scaling, so the constraint pins
//! the shape of the feature cloud without pinning the points.

use crate::tensor::{Data, Tape, TensorError, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Triples with norms below this are skipped, not fatal.
pub const DEGENERATE_EPS: f64 = 1e-8;

/// Batches larger than this switch from full enumeration to sampling.
pub const ENUMERATE_LIMIT: usize = 8;

/// Sample size for large batches.
pub const SAMPLED_TRIPLES: usize = 256;

#[derive(Debug, Error)]
pub enum TopologyError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Normalized per-layer fusion weights.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights(pub Vec<f64>);

impl LayerWeights {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Ordered index triples (i, j, k) with distinct entries.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletSet(pub Vec<(usize, usize, usize)>);

/// Gaussian kernel over layer indices `1..=h`, centered at `mu` jittered by
/// up to `±jitter`, normalized to sum 1.
pub fn sample_layer_weights(
    h: usize,
    mu: f64,
    sigma: f64,
    jitter: f64,
    rng: &mut ChaCha8Rng,
) -> LayerWeights {
    assert!(h >= 1, "need at least one layer");
    assert!(sigma > 0.0, "sigma must be positive");
    let center = if jitter > 0.0 { mu + rng.gen_range(-jitter..jitter) } else { mu };
    let mut weights: Vec<f64> = (1..=h)
        .map(|i| (-((i as f64 - center).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = weights.iter().sum();
    for w in weights.iter_mut() {
        *w /= sum;
    }
    LayerWeights(weights)
}

/// `z_w = sum_i w_i * z_i` over per-layer features.
pub fn fuse_layers<'t>(
    layer_feats: &[Var<'t>],
    weights: &LayerWeights,
) -> Result<Var<'t>, TopologyError> {
    if layer_feats.len() != weights.len() {
        return Err(TopologyError::InvalidInput(format!(
            "{} layer features but {} weights",
            layer_feats.len(),
            weights.len()
        )));
    }
    let mut acc: Option<Var<'t>> = None;
    for (feat, &w) in layer_feats.iter().zip(&weights.0) {
        let term = feat.scale(w);
        acc = Some(match acc {
            Some(a) => a.add(term),
            None => term,
        });
    }
    Ok(acc.expect("weights are nonempty"))
}

/// All ordered triples of distinct indices for small batches, otherwise a
/// uniform sample of `SAMPLED_TRIPLES` triples.
pub fn make_triplets(batch: usize, rng: &mut ChaCha8Rng) -> TripletSet {
    let mut triples = Vec::new();
    if batch < 3 {
        return TripletSet(triples);
    }
    if batch <= ENUMERATE_LIMIT {
        for i in 0..batch {
            for j in 0..batch {
                for k in 0..batch {
                    if i != j && j != k && i != k {
                        triples.push((i, j, k));
                    }
                }
            }
        }
    } else {
        while triples.len() < SAMPLED_TRIPLES {
            let i = rng.gen_range(0..batch);
            let j = rng.gen_range(0..batch);
            let k = rng.gen_range(0..batch);
            if i != j && j != k && i != k {
                triples.push((i, j, k));
            }
        }
    }
    TripletSet(triples)
}

/// Cosine of the angle at vertex `j` formed by points `i` and `k`.
/// Returns `None` when either edge is shorter than `DEGENERATE_EPS`.
pub fn angle_relation<'t>(
    fused: &[Var<'t>],
    i: usize,
    j: usize,
    k: usize,
) -> Result<Option<Var<'t>>, TopologyError> {
    if i == j || j == k || i == k || i >= fused.len() || j >= fused.len() || k >= fused.len() {
        return Err(TopologyError::InvalidInput(format!(
            "triple ({i}, {j}, {k}) invalid for batch of {}",
            fused.len()
        )));
    }
    let e_ij = fused[i].sub(fused[j]);
    let e_kj = fused[k].sub(fused[j]);
    if e_ij.value().norm() < DEGENERATE_EPS || e_kj.value().norm() < DEGENERATE_EPS {
        return Ok(None);
    }
    Ok(Some(e_ij.cos_sim(e_kj)?))
}

/// Mean `|angle_teacher - angle_student|` over non-degenerate triples.
/// Returns the loss and the number of skipped triples.
pub fn stp_vision_loss<'t>(
    tape: &'t Tape,
    teacher_fused: &[Var<'t>],
    student_fused: &[Var<'t>],
    triplets: &TripletSet,
) -> Result<(Var<'t>, usize), TopologyError> {
    if teacher_fused.len() != student_fused.len() {
        return Err(TopologyError::InvalidInput(format!(
            "teacher batch {} vs student batch {}",
            teacher_fused.len(),
            student_fused.len()
        )));
    }
    if teacher_fused.len() < 3 || triplets.0.is_empty() {
        return Ok((tape.leaf(Data::scalar(0.0)), 0));
    }
    let mut skipped = 0;
    let mut terms: Vec<Var<'t>> = Vec::new();
    for &(i, j, k) in &triplets.0 {
        let t_angle = angle_relation(teacher_fused, i, j, k)?;
        let s_angle = angle_relation(student_fused, i, j, k)?;
        match (t_angle, s_angle) {
            (Some(a), Some(b)) => terms.push(a.sub(b).abs()),
            _ => skipped += 1,
        }
    }
    if terms.is_empty() {
        return Ok((tape.leaf(Data::scalar(0.0)), skipped));
    }
    let n = terms.len() as f64;
    let mut total = terms[0];
    for t in &terms[1..] {
        total = total.add(*t);
    }
    Ok((total.scale(1.0 / n), skipped))
}

/// Mean absolute difference between teacher and student text embeddings.
pub fn stp_text_loss<'t>(
    teacher_text: Var<'t>,
    student_text: Var<'t>,
) -> Result<Var<'t>, TopologyError> {
    if teacher_text.shape() != student_text.shape() {
        return Err(TopologyError::InvalidInput(format!(
            "text embedding shapes differ: {:?} vs {:?}",
            teacher_text.shape(),
            student_text.shape()
        )));
    }
    Ok(student_text.sub(teacher_text).abs().mean_all())
}

/// `L_STP = L_vision + L_text`.
pub fn stp_total<'t>(vision: Var<'t>, text: Var<'t>) -> Var<'t> {
    vision.add(text)
}
