//! Rotary position embedding on adjacent coordinate pairs.

use crate::error::{OstError, Result};
use crate::tensor_core::Tensor;

/// Per-pair angular frequencies `base^{−2i/head_dim}`.
pub fn rope_frequencies(head_dim: usize, base: f64) -> Vec<f64> {
    (0..head_dim / 2)
        .map(|i| base.powf(-2.0 * i as f64 / head_dim as f64))
        .collect()
}

/// Rotate every `head_dim` segment of each row in place. Row `t` uses
/// position `positions[t]`. `inverse` applies the transpose rotation, which
/// is also the backward pass.
pub fn rope_rows_in_place(
    x: &mut [f64],
    width: usize,
    head_dim: usize,
    positions: &[usize],
    freqs: &[f64],
    inverse: bool,
) {
    debug_assert_eq!(x.len(), width * positions.len());
    let sign = if inverse { -1.0 } else { 1.0 };
    for (row, &pos) in x.chunks_mut(width).zip(positions) {
        for (i, &f) in freqs.iter().enumerate() {
            let (s, c) = (sign * pos as f64 * f).sin_cos();
            for head in row.chunks_mut(head_dim) {
                let (a, b) = (head[2 * i], head[2 * i + 1]);
                head[2 * i] = a * c - b * s;
                head[2 * i + 1] = a * s + b * c;
            }
        }
    }
}

/// Apply rotary embedding to query and key rows (`tokens × head_dim`).
pub fn rope_apply(
    q: &Tensor,
    k: &Tensor,
    positions: &[usize],
    base: f64,
) -> Result<(Tensor, Tensor)> {
    let hd = q.cols();
    if hd % 2 != 0 {
        return Err(OstError::validation(format!(
            "head_dim {hd} must be even for rotary embedding"
        )));
    }
    if q.shape() != k.shape() || q.rows() != positions.len() {
        return Err(OstError::validation(format!(
            "query {:?}, key {:?} and {} positions disagree",
            q.shape(),
            k.shape(),
            positions.len()
        )));
    }
    let freqs = rope_frequencies(hd, base);
    let (mut q2, mut k2) = (q.clone(), k.clone());
    rope_rows_in_place(q2.data_mut(), hd, hd, positions, &freqs, false);
    rope_rows_in_place(k2.data_mut(), hd, hd, positions, &freqs, false);
    Ok((q2, k2))
}
