//! Symmetric eigendecomposition by cyclic Jacobi rotations.

use super::tensor::Tensor;
use crate::error::{OstError, Result};

const MAX_SWEEPS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct EigenDecomposition {
    /// Sorted descending.
    pub eigenvalues: Vec<f64>,
    /// Column `i` pairs with `eigenvalues[i]`.
    pub eigenvectors: Tensor,
}

impl EigenDecomposition {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn eigenvector(&self, i: usize) -> Vec<f64> {
        self.eigenvectors.column(i)
    }

    /// `Q Λ Qᵀ`
    pub fn reconstruct(&self) -> Tensor {
        self.eigenvectors
            .scale_columns(&self.eigenvalues)
            .matmul_t(&self.eigenvectors)
    }
}

/// Largest relative asymmetry tolerated by [`eig_symmetric`].
pub const SYMMETRY_TOL: f64 = 1e-12;

pub fn check_symmetric(sigma: &Tensor) -> Result<()> {
    if !sigma.is_square() {
        return Err(OstError::validation(format!(
            "expected a square matrix, got {:?}",
            sigma.shape()
        )));
    }
    if !sigma.is_finite() {
        return Err(OstError::validation("matrix has non-finite entries"));
    }
    let n = sigma.rows();
    let scale = sigma.max_abs().max(f64::MIN_POSITIVE);
    for i in 0..n {
        for j in i + 1..n {
            if (sigma.at(i, j) - sigma.at(j, i)).abs() > SYMMETRY_TOL * scale {
                return Err(OstError::validation(format!(
                    "matrix is not symmetric at ({i},{j}): {} vs {}",
                    sigma.at(i, j),
                    sigma.at(j, i)
                )));
            }
        }
    }
    Ok(())
}

/// Eigenvalues (descending) and orthonormal eigenvectors of a symmetric
/// matrix. Each eigenvector is signed so that its largest-magnitude entry is
/// positive, the lowest index winning ties.
pub fn eig_symmetric(sigma: &Tensor) -> Result<EigenDecomposition> {
    check_symmetric(sigma)?;
    let n = sigma.rows();
    // Work on the exactly symmetrized matrix.
    let mut a = sigma.sym();
    let mut v = Tensor::eye(n);
    let total = a.frobenius_norm();
    let tol = 1e-12 * total;

    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        if off_diagonal_norm(&a) <= tol {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a.at(p, q);
                if apq == 0.0 {
                    continue;
                }
                let app = a.at(p, p);
                let aqq = a.at(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta.is_infinite() {
                    0.0
                } else {
                    theta.signum() / (theta.abs() + theta.hypot(1.0))
                };
                if t == 0.0 {
                    continue;
                }
                let c = 1.0 / t.hypot(1.0);
                let s = t * c;
                rotate(&mut a, &mut v, p, q, c, s, t, apq);
            }
        }
    }
    if !converged && off_diagonal_norm(&a) > tol {
        return Err(OstError::numerical(format!(
            "Jacobi eigensolver did not converge in {MAX_SWEEPS} sweeps (n = {n})"
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    let diag = a.diagonal();
    // Stable, so equal eigenvalues keep their original order.
    order.sort_by(|&i, &j| diag[j].total_cmp(&diag[i]));

    let eigenvalues: Vec<f64> = order.iter().map(|&i| diag[i]).collect();
    let mut eigenvectors = Tensor::zeros(&[n, n]);
    for (dst, &src) in order.iter().enumerate() {
        let mut col = v.column(src);
        fix_sign(&mut col);
        for (i, x) in col.into_iter().enumerate() {
            eigenvectors.set(i, dst, x);
        }
    }
    Ok(EigenDecomposition {
        eigenvalues,
        eigenvectors,
    })
}

fn off_diagonal_norm(a: &Tensor) -> f64 {
    let n = a.rows();
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                acc += a.at(i, j) * a.at(i, j);
            }
        }
    }
    acc.sqrt()
}

#[allow(clippy::too_many_arguments)]
fn rotate(a: &mut Tensor, v: &mut Tensor, p: usize, q: usize, c: f64, s: f64, t: f64, apq: f64) {
    let n = a.rows();
    let app = a.at(p, p);
    let aqq = a.at(q, q);
    a.set(p, p, app - t * apq);
    a.set(q, q, aqq + t * apq);
    a.set(p, q, 0.0);
    a.set(q, p, 0.0);
    for k in 0..n {
        if k == p || k == q {
            continue;
        }
        let akp = a.at(k, p);
        let akq = a.at(k, q);
        let nkp = c * akp - s * akq;
        let nkq = s * akp + c * akq;
        a.set(k, p, nkp);
        a.set(p, k, nkp);
        a.set(k, q, nkq);
        a.set(q, k, nkq);
    }
    for k in 0..n {
        let vkp = v.at(k, p);
        let vkq = v.at(k, q);
        v.set(k, p, c * vkp - s * vkq);
        v.set(k, q, s * vkp + c * vkq);
    }
}

fn fix_sign(col: &mut [f64]) {
    let mut best = 0;
    for (i, x) in col.iter().enumerate() {
        if x.abs() > col[best].abs() {
            best = i;
        }
    }
    if col[best] < 0.0 {
        col.iter_mut().for_each(|x| *x = -*x);
    }
}
