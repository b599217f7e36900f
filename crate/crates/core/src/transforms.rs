//! Linear transforms acting on data rows from the right (`x → x·T`).
//!
//! Weights are stored output-major (`out × in`), so a layer computes
//! `y = x·Wᵀ`. Rotating a layer's input space by `R` therefore replaces
//! `W` with `W·R`.

use crate::error::{OstError, Result};
use crate::qsur::GaussianStats;
use crate::tensor_core::{eig_symmetric, hadamard, qr, Rng, Tensor};

/// An orthogonal matrix and a positive diagonal scale, `T = O·diag(s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformPair {
    pub orthogonal: Tensor,
    pub scale: Vec<f64>,
}

pub const PAIR_ORTHO_TOL: f64 = 1e-8;

impl TransformPair {
    pub fn new(orthogonal: Tensor, scale: Vec<f64>) -> Result<Self> {
        let d = scale.len();
        if orthogonal.shape() != [d, d] {
            return Err(OstError::validation(format!(
                "orthogonal factor {:?} does not match scale length {d}",
                orthogonal.shape()
            )));
        }
        let err = orthogonal.orthogonality_max_error();
        if !(err <= PAIR_ORTHO_TOL) {
            return Err(OstError::validation(format!(
                "orthogonal factor is off the manifold by {err:e}"
            )));
        }
        if let Some(s) = scale.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(OstError::validation(format!(
                "scale entry {s} is not positive"
            )));
        }
        Ok(Self { orthogonal, scale })
    }

    pub fn identity(d: usize) -> Self {
        Self {
            orthogonal: Tensor::eye(d),
            scale: vec![1.0; d],
        }
    }

    pub fn dim(&self) -> usize {
        self.scale.len()
    }

    /// The dense matrix `O·diag(s)`.
    pub fn matrix(&self) -> Tensor {
        self.orthogonal.scale_columns(&self.scale)
    }
}

/// `T = c·Q·Λ^{−1/2}`: whitens the distribution so `TᵀΣT = c²I`.
pub fn best_transform(stats: &GaussianStats, c: f64) -> Result<Tensor> {
    if !(c.is_finite() && c > 0.0) {
        return Err(OstError::validation(format!(
            "scale c = {c} must be positive"
        )));
    }
    let l = &stats.eig.eigenvalues;
    if let Some(v) = l.iter().find(|v| !(**v > 0.0)) {
        return Err(OstError::validation(format!(
            "covariance is not positive definite (eigenvalue {v:e})"
        )));
    }
    let inv_root: Vec<f64> = l.iter().map(|v| c / v.sqrt()).collect();
    Ok(stats.eig.eigenvectors.scale_columns(&inv_root))
}

/// `T = Q·Hᵀ`: rotates into the eigenbasis, then spreads every principal
/// axis evenly across all coordinates. The transformed covariance `HΛHᵀ`
/// has every diagonal entry equal to `trace/d`.
pub fn best_orthogonal(stats: &GaussianStats) -> Result<Tensor> {
    let h = hadamard(stats.dim())?;
    Ok(stats.eig.eigenvectors.matmul_t(&h))
}

/// Weight-outlier-minimizing initialization for a rotation shared by all
/// layers reading one input space. `weight_stack` holds every such layer's
/// rows (`Σ out × in`). Returns `R = Q_W·Hᵀ` with `Q_W` the eigenbasis of the
/// row covariance over input channels.
pub fn womi_init(weight_stack: &Tensor) -> Result<Tensor> {
    if weight_stack.ndim() != 2 {
        return Err(OstError::validation(format!(
            "weight stack must be a matrix, got shape {:?}",
            weight_stack.shape()
        )));
    }
    let ic = weight_stack.cols();
    if weight_stack.rows() < ic {
        return Err(OstError::validation(format!(
            "weight stack has {} rows, need at least {ic}",
            weight_stack.rows()
        )));
    }
    let h = hadamard(ic)?;
    let cov = weight_stack.row_covariance().sym();
    let eig = eig_symmetric(&cov)?;
    Ok(eig.eigenvectors.matmul_t(&h))
}

/// Fuse a pair between two consecutive linear maps in row form
/// (`y = x·W1·W2`): `W1' = W1·O·diag(s)`, `W2' = diag(s)⁻¹·Oᵀ·W2`.
pub fn apply_pair(w1: &Tensor, w2: &Tensor, pair: &TransformPair) -> Result<(Tensor, Tensor)> {
    let d = pair.dim();
    if w1.ndim() != 2 || w2.ndim() != 2 || w1.cols() != d || w2.rows() != d {
        return Err(OstError::validation(format!(
            "shapes {:?} and {:?} do not meet at pair dimension {d}",
            w1.shape(),
            w2.shape()
        )));
    }
    let inv: Vec<f64> = pair.scale.iter().map(|s| 1.0 / s).collect();
    let a = w1.matmul(&pair.orthogonal).scale_columns(&pair.scale);
    let b = pair.orthogonal.t_matmul(w2).scale_rows(&inv);
    Ok((a, b))
}

/// Haar-distributed orthogonal matrix: QR of a Gaussian matrix with the
/// diagonal of R made non-negative.
pub fn random_orthogonal(d: usize, rng: &mut Rng) -> Tensor {
    let g = Tensor::matrix(d, d, rng.normal_vec(d * d));
    qr(&g).0
}

/// `diag(±1)·H` with random signs, the usual randomized Hadamard rotation.
pub fn random_hadamard(d: usize, rng: &mut Rng) -> Result<Tensor> {
    let signs: Vec<f64> = (0..d)
        .map(|_| if rng.below(2) == 0 { 1.0 } else { -1.0 })
        .collect();
    Ok(hadamard(d)?.scale_rows(&signs))
}
