//! Rotary position embeddings over flat `[seq × heads·head_dim]` activations.
//!
//! 1-D: consecutive dim pairs (2i, 2i+1) of each head rotate by
//! `pos · base^(-2i/head_dim)`. The decoder uses this with its causal stream
//! positions.
//!
//! 2-D: the head dimension is split in half; the first half is a 1-D rotation
//! driven by the row index, the second half by the column index. The encoder
//! uses this over the patch grid, so attention sees genuine spatial offsets.

use crate::tensor::{Tensor, TensorError};

pub const DEFAULT_ROPE_BASE: f64 = 10_000.0;

fn check_layout(
    op: &'static str,
    x: &Tensor,
    heads: usize,
    positions: usize,
    quantum: usize,
) -> Result<(usize, usize), TensorError> {
    let w = x.last_dim();
    let seq = x.rows();
    if heads == 0 || w % heads != 0 {
        return Err(TensorError::ShapeMismatch {
            op,
            detail: format!("width {w} not divisible by {heads} heads"),
        });
    }
    let hd = w / heads;
    if hd % quantum != 0 {
        return Err(TensorError::ShapeMismatch {
            op,
            detail: format!("head dim {hd} not divisible by {quantum}"),
        });
    }
    if positions != seq {
        return Err(TensorError::ShapeMismatch {
            op,
            detail: format!("{positions} positions for {seq} rows"),
        });
    }
    Ok((seq, hd))
}

fn rotate_pairs(chunk: &mut [f64], pos: f64, dim: usize, base: f64) {
    // chunk.len() == dim, rotated as dim/2 consecutive pairs.
    for i in 0..dim / 2 {
        let theta = pos * base.powf(-2.0 * i as f64 / dim as f64);
        let (sin, cos) = theta.sin_cos();
        let a = chunk[2 * i];
        let b = chunk[2 * i + 1];
        chunk[2 * i] = a * cos - b * sin;
        chunk[2 * i + 1] = a * sin + b * cos;
    }
}

/// Sequence-position rotation; `x` is `[seq × heads·hd]`, `hd` even.
pub fn rope_1d(
    x: &Tensor,
    heads: usize,
    positions: &[i64],
    base: f64,
) -> Result<Tensor, TensorError> {
    let (seq, hd) = check_layout("rope_1d", x, heads, positions.len(), 2)?;
    let w = x.last_dim();
    let mut out = x.data().to_vec();
    for s in 0..seq {
        let pos = positions[s] as f64;
        for h in 0..heads {
            let off = s * w + h * hd;
            rotate_pairs(&mut out[off..off + hd], pos, hd, base);
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Grid-position rotation; first half of each head follows `rows`, second
/// half follows `cols`. `hd` must be divisible by 4.
pub fn rope_2d(
    x: &Tensor,
    heads: usize,
    rows: &[i64],
    cols: &[i64],
    base: f64,
) -> Result<Tensor, TensorError> {
    if rows.len() != cols.len() {
        return Err(TensorError::ShapeMismatch {
            op: "rope_2d",
            detail: format!("{} rows vs {} cols", rows.len(), cols.len()),
        });
    }
    let (seq, hd) = check_layout("rope_2d", x, heads, rows.len(), 4)?;
    let w = x.last_dim();
    let half = hd / 2;
    let mut out = x.data().to_vec();
    for s in 0..seq {
        for h in 0..heads {
            let off = s * w + h * hd;
            rotate_pairs(&mut out[off..off + half], rows[s] as f64, half, base);
            rotate_pairs(&mut out[off + half..off + hd], cols[s] as f64, half, base);
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}
