//! Small dense helpers: Householder QR, LU solves, Sylvester–Hadamard.

use super::tensor::Tensor;
use crate::error::{OstError, Result};

/// Householder QR of a square matrix, normalized so that `R` has a
/// non-negative diagonal. Returns `(Q, R)`.
pub fn qr(a: &Tensor) -> (Tensor, Tensor) {
    assert!(a.is_square(), "qr expects a square matrix");
    let n = a.rows();
    let mut r = a.clone();
    let mut q = Tensor::eye(n);
    for k in 0..n.saturating_sub(1) {
        let norm = (k..n).map(|i| r.at(i, k).powi(2)).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let alpha = if r.at(k, k) > 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = (k..n).map(|i| r.at(i, k)).collect();
        v[0] -= alpha;
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        if vnorm2 == 0.0 {
            continue;
        }
        // R ← (I − 2vvᵀ/vᵀv) R
        for j in 0..n {
            let d: f64 = (k..n).map(|i| v[i - k] * r.at(i, j)).sum();
            let f = 2.0 * d / vnorm2;
            for i in k..n {
                *r.at_mut(i, j) -= f * v[i - k];
            }
        }
        // Q ← Q (I − 2vvᵀ/vᵀv)
        for i in 0..n {
            let d: f64 = (k..n).map(|j| q.at(i, j) * v[j - k]).sum();
            let f = 2.0 * d / vnorm2;
            for j in k..n {
                *q.at_mut(i, j) -= f * v[j - k];
            }
        }
    }
    for k in 0..n {
        if r.at(k, k) < 0.0 {
            for j in 0..n {
                *r.at_mut(k, j) = -r.at(k, j);
            }
            for i in 0..n {
                *q.at_mut(i, k) = -q.at(i, k);
            }
        }
        for i in k + 1..n {
            r.set(i, k, 0.0);
        }
    }
    (q, r)
}

/// Solve `A X = B` by LU with partial pivoting.
pub fn solve(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    assert!(a.is_square(), "solve expects a square system matrix");
    let n = a.rows();
    assert_eq!(b.rows(), n, "solve right-hand side rows");
    let m = b.cols();
    let mut lu = a.clone();
    let mut x = b.clone();
    let scale = a.max_abs().max(f64::MIN_POSITIVE);
    for k in 0..n {
        let mut piv = k;
        for i in k + 1..n {
            if lu.at(i, k).abs() > lu.at(piv, k).abs() {
                piv = i;
            }
        }
        if lu.at(piv, k).abs() <= 1e-14 * scale {
            return Err(OstError::numerical(format!(
                "singular system matrix (pivot {k} is {:e})",
                lu.at(piv, k)
            )));
        }
        if piv != k {
            for j in 0..n {
                let t = lu.at(k, j);
                lu.set(k, j, lu.at(piv, j));
                lu.set(piv, j, t);
            }
            for j in 0..m {
                let t = x.at(k, j);
                x.set(k, j, x.at(piv, j));
                x.set(piv, j, t);
            }
        }
        let p = lu.at(k, k);
        for i in k + 1..n {
            let f = lu.at(i, k) / p;
            if f == 0.0 {
                continue;
            }
            lu.set(i, k, f);
            for j in k + 1..n {
                *lu.at_mut(i, j) -= f * lu.at(k, j);
            }
            for j in 0..m {
                *x.at_mut(i, j) -= f * x.at(k, j);
            }
        }
    }
    for k in (0..n).rev() {
        let p = lu.at(k, k);
        for j in 0..m {
            let mut acc = x.at(k, j);
            for i in k + 1..n {
                acc -= lu.at(k, i) * x.at(i, j);
            }
            x.set(k, j, acc / p);
        }
    }
    Ok(x)
}

/// Sign-fixed re-orthonormalization of a nearly orthogonal matrix.
pub fn orthonormalize(a: &Tensor) -> Tensor {
    qr(a).0
}

/// Normalized Sylvester–Hadamard matrix of order `d` (entries `±d^{-1/2}`).
pub fn hadamard(d: usize) -> Result<Tensor> {
    if d == 0 || !d.is_power_of_two() {
        return Err(OstError::UnsupportedDimension {
            dim: d,
            reason: "Hadamard matrices are only built for powers of two",
        });
    }
    let mut signs = vec![1i8];
    let mut n = 1;
    while n < d {
        let mut next = vec![0i8; 4 * n * n];
        for i in 0..n {
            for j in 0..n {
                let s = signs[i * n + j];
                next[i * 2 * n + j] = s;
                next[i * 2 * n + j + n] = s;
                next[(i + n) * 2 * n + j] = s;
                next[(i + n) * 2 * n + j + n] = -s;
            }
        }
        signs = next;
        n *= 2;
    }
    let c = 1.0 / (d as f64).sqrt();
    Ok(Tensor::matrix(
        d,
        d,
        signs.into_iter().map(|s| f64::from(s) * c).collect(),
    ))
}

/// Multiply each row of `x` by the normalized Hadamard matrix of matching
/// width, in place, with the fast Walsh–Hadamard butterfly. Equivalent to
/// `x · H` (H is symmetric).
pub fn hadamard_rows_in_place(x: &mut [f64], width: usize) {
    debug_assert!(width.is_power_of_two());
    let c = 1.0 / (width as f64).sqrt();
    for row in x.chunks_mut(width) {
        let mut h = 1;
        while h < width {
            for i in (0..width).step_by(2 * h) {
                for j in i..i + h {
                    let a = row[j];
                    let b = row[j + h];
                    row[j] = a + b;
                    row[j + h] = a - b;
                }
            }
            h *= 2;
        }
        row.iter_mut().for_each(|v| *v *= c);
    }
}
