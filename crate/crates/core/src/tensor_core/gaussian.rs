use super::eig::eig_symmetric;
use super::rng::Rng;
use super::tensor::Tensor;
use crate::error::{OstError, Result};

/// Draw `n` rows i.i.d. from `N(mu, sigma)` by coloring standard normals
/// with `Q Λ^{1/2}`. Eigenvalues in `[-1e-10, 0)` are clamped to zero.
pub fn gaussian_sample(rng: &mut Rng, mu: &[f64], sigma: &Tensor, n: usize) -> Result<Tensor> {
    let d = mu.len();
    if sigma.shape() != [d, d] {
        return Err(OstError::validation(format!(
            "covariance shape {:?} does not match mean length {d}",
            sigma.shape()
        )));
    }
    if n == 0 {
        return Err(OstError::validation("sample count must be positive"));
    }
    let eig = eig_symmetric(sigma)?;
    let mut roots = Vec::with_capacity(d);
    for &l in &eig.eigenvalues {
        if l < -1e-10 {
            return Err(OstError::validation(format!(
                "covariance is not positive semidefinite (eigenvalue {l:e})"
            )));
        }
        roots.push(l.max(0.0).sqrt());
    }
    // Row form: x = mu + z · diag(√λ) · Qᵀ
    let coloring = eig.eigenvectors.scale_columns(&roots).transpose();
    let z = Tensor::matrix(n, d, rng.normal_vec(n * d));
    let mut x = z.matmul(&coloring);
    for row in x.data_mut().chunks_mut(d) {
        for (v, m) in row.iter_mut().zip(mu) {
            *v += m;
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_for_a_seed() {
        let sigma = Tensor::from_rows(&[vec![2.0, 0.5], vec![0.5, 1.0]]);
        let a = gaussian_sample(&mut Rng::new(8), &[1.0, -1.0], &sigma, 100).unwrap();
        let b = gaussian_sample(&mut Rng::new(8), &[1.0, -1.0], &sigma, 100).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_covariance_gives_the_mean() {
        let x =
            gaussian_sample(&mut Rng::new(1), &[3.0, 4.0], &Tensor::zeros(&[2, 2]), 10).unwrap();
        for i in 0..10 {
            assert_eq!(x.row(i), &[3.0, 4.0]);
        }
    }

    #[test]
    fn rejects_indefinite() {
        let sigma = Tensor::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]);
        assert!(gaussian_sample(&mut Rng::new(1), &[0.0, 0.0], &sigma, 10).is_err());
    }

    #[test]
    fn large_sample_covariance() {
        let x =
            gaussian_sample(&mut Rng::new(12), &[0.0, 0.0], &Tensor::eye(2), 1_000_000).unwrap();
        let cov = x.row_covariance();
        assert!(cov.max_abs_diff(&Tensor::eye(2)) < 0.01, "{cov:?}");

        let sigma = Tensor::diag(&[4.0, 1.0]);
        let x = gaussian_sample(&mut Rng::new(13), &[0.0, 0.0], &sigma, 1_000_000).unwrap();
        let cov = x.row_covariance();
        assert!((cov.at(0, 0) / 4.0 - 1.0).abs() < 0.01);
        assert!((cov.at(1, 1) - 1.0).abs() < 0.01);
    }
}
