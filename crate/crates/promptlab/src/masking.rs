//! Attention-guided foreground filtering.
//!
//! The frozen teacher's last-layer class-token attention, averaged over
//! heads, scores each patch. Patches whose score lands strictly above the
//! `(100 - q)`-th percentile are erased from the training image; ties
//! survive, so uniform attention masks nothing. Masking is a training-time
//! regularizer only and is never applied at evaluation.

use crate::model::{DualEncoder, Image, ModelError};
use crate::tensor::{Data, Tape};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MaskError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Per-patch attention scores on the patch grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    /// `[grid, grid]` nonnegative scores.
    pub grid: Data,
}

/// Per-patch binary keep/drop grid plus the quantile that built it.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    /// `[grid, grid]` entries in {0, 1}; 0 drops the patch.
    pub grid: Data,
    pub threshold_q: f64,
}

impl Mask {
    pub fn all_ones(grid_side: usize) -> Self {
        Mask {
            grid: Data::matrix(grid_side, grid_side, vec![1.0; grid_side * grid_side]),
            threshold_q: 0.0,
        }
    }

    pub fn zero_fraction(&self) -> f64 {
        let zeros = self.grid.values.iter().filter(|&&v| v == 0.0).count();
        zeros as f64 / self.grid.len() as f64
    }
}

/// Head-averaged class-token attention over patches, from the teacher's
/// last layer.
pub fn extract_attention(teacher: &DualEncoder, image: &Image) -> Result<AttentionMap, MaskError> {
    if !teacher.is_frozen() {
        return Err(MaskError::InvalidInput(
            "attention source must be the frozen teacher".into(),
        ));
    }
    let tape = Tape::new();
    let stack = teacher.encode_image(&tape, image, None)?;
    let attn = stack.attention.last().expect("at least one layer");
    let heads = attn.shape[0];
    let t = attn.shape[1];
    let n_patches = teacher.config.n_patches();
    let grid_side = teacher.config.patches_per_side();
    debug_assert_eq!(t, 1 + n_patches);

    let mut scores = vec![0.0; n_patches];
    for h in 0..heads {
        for p in 0..n_patches {
            // row 0 is the class token; columns 1.. are patches
            scores[p] += attn.values[(h * t) * t + 1 + p];
        }
    }
    for v in scores.iter_mut() {
        *v /= heads as f64;
    }
    Ok(AttentionMap { grid: Data::matrix(grid_side, grid_side, scores) })
}

/// Drop the top `q` percent of attention scores. `q = 0` keeps everything.
pub fn build_mask(attn: &AttentionMap, q: f64) -> Result<Mask, MaskError> {
    if !(0.0..=100.0).contains(&q) {
        return Err(MaskError::InvalidInput(format!(
            "mask threshold must be in [0, 100], got {q}"
        )));
    }
    let n = attn.grid.len();
    let drop = ((n as f64) * q / 100.0).floor() as usize;
    let cutoff = if drop == 0 {
        f64::INFINITY
    } else if drop >= n {
        f64::NEG_INFINITY
    } else {
        let mut sorted = attn.grid.values.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite attention"));
        sorted[n - drop - 1]
    };
    let values = attn
        .grid
        .values
        .iter()
        .map(|&v| if v > cutoff { 0.0 } else { 1.0 })
        .collect();
    Ok(Mask {
        grid: Data::new(attn.grid.shape.clone(), values),
        threshold_q: q,
    })
}

/// Zero every pixel of every dropped patch; keep the rest bit-identical.
pub fn apply_mask(mask: &Mask, image: &Image) -> Result<Image, MaskError> {
    let s = image.size();
    let grid_side = mask.grid.rows();
    if grid_side == 0 || s % grid_side != 0 {
        return Err(MaskError::InvalidInput(format!(
            "mask grid {grid_side} does not divide image size {s}"
        )));
    }
    let patch = s / grid_side;
    let mut pixels = image.pixels.clone();
    for pr in 0..grid_side {
        for pc in 0..grid_side {
            if mask.grid.at(pr, pc) != 0.0 {
                continue;
            }
            for ch in 0..3 {
                for y in 0..patch {
                    for x in 0..patch {
                        let row = pr * patch + y;
                        let col = pc * patch + x;
                        pixels.values[(ch * s + row) * s + col] = 0.0;
                    }
                }
            }
        }
    }
    Ok(Image::new(pixels))
}
