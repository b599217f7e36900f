//! Quantization space utilization rate: the hypervolume of a Gaussian's
//! confidence ellipsoid divided by the hypervolume of the cube that
//! quantization has to cover.
//!
//! Volumes overflow quickly with dimension (a 64-d ellipsoid easily exceeds
//! `f64::MAX`), so everything is computed as a logarithm and the plain
//! volumes are only reported when finite.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{OstError, Result};
use crate::tensor_core::{chi2_quantile, eig_symmetric, ln_gamma, EigenDecomposition, Rng, Tensor};

pub const DEFAULT_ALPHA: f64 = 0.99;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QsurVariant {
    /// Cube edge from the extremal points of the principal axes.
    #[default]
    PrincipalAxes,
    /// Cube edge from the true axis-aligned bounding box of the ellipsoid.
    ExactBox,
}

impl QsurVariant {
    pub fn name(self) -> &'static str {
        match self {
            QsurVariant::PrincipalAxes => "principal_axes",
            QsurVariant::ExactBox => "exact_box",
        }
    }
}

#[derive(Debug, Clone)]
pub struct GaussianStats {
    pub mu: Vec<f64>,
    pub sigma: Tensor,
    pub eig: EigenDecomposition,
    pub alpha: f64,
}

impl GaussianStats {
    pub fn new(mu: Vec<f64>, sigma: Tensor, alpha: f64) -> Result<Self> {
        let d = mu.len();
        if d == 0 {
            return Err(OstError::validation("empty mean vector"));
        }
        if sigma.shape() != [d, d] {
            return Err(OstError::validation(format!(
                "covariance shape {:?} does not match dimension {d}",
                sigma.shape()
            )));
        }
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(OstError::validation(format!(
                "alpha {alpha} outside (0, 1)"
            )));
        }
        if mu.iter().any(|v| !v.is_finite()) {
            return Err(OstError::validation("mean vector has non-finite entries"));
        }
        let eig = eig_symmetric(&sigma)?;
        Ok(Self {
            mu,
            sigma,
            eig,
            alpha,
        })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    fn chi2(&self) -> Result<f64> {
        chi2_quantile(self.dim(), self.alpha)
    }

    fn require_positive_definite(&self) -> Result<()> {
        match self.eig.eigenvalues.iter().position(|&l| !(l > 0.0)) {
            Some(i) => Err(OstError::validation(format!(
                "eigenvalue {i} is {:e}; the ellipsoid is degenerate",
                self.eig.eigenvalues[i]
            ))),
            None => Ok(()),
        }
    }

    /// Statistics of `x·T` for data rows `x` drawn from `self`:
    /// mean `μT`, covariance `TᵀΣT`.
    pub fn transformed(&self, t: &Tensor) -> Result<Self> {
        let d = self.dim();
        if t.shape() != [d, d] {
            return Err(OstError::validation(format!(
                "transform shape {:?} does not match dimension {d}",
                t.shape()
            )));
        }
        let mu = Tensor::matrix(1, d, self.mu.clone()).matmul(t).into_data();
        let sigma = t.t_matmul(&self.sigma).matmul(t).sym();
        Self::new(mu, sigma, self.alpha)
    }
}

/// Mean and regularized unbiased covariance of the rows of `x`.
///
/// `ε·I` with `ε = 1e-9·trace/d` is added so rank-deficient samples still
/// give a proper ellipsoid. A zero trace falls back to `ε = 1e-12`.
pub fn fit_gaussian(x: &Tensor, alpha: f64) -> Result<GaussianStats> {
    if x.ndim() != 2 {
        return Err(OstError::validation(format!(
            "expected an n×d matrix, got shape {:?}",
            x.shape()
        )));
    }
    if x.rows() < 2 {
        return Err(OstError::validation(format!(
            "need at least 2 samples, got {}",
            x.rows()
        )));
    }
    if !x.is_finite() {
        return Err(OstError::validation("samples contain non-finite values"));
    }
    let d = x.cols();
    let mut sigma = x.row_covariance();
    let tr = sigma.trace();
    let eps = if tr > 0.0 {
        1e-9 * tr / d as f64
    } else {
        1e-12
    };
    for i in 0..d {
        *sigma.at_mut(i, i) += eps;
    }
    GaussianStats::new(x.column_means(), sigma, alpha)
}

/// `ln(π^{d/2}/Γ(d/2 + 1))`, the log volume of the unit d-ball.
pub fn ln_unit_ball_volume(d: usize) -> f64 {
    let h = d as f64 / 2.0;
    h * PI.ln() - ln_gamma(h + 1.0)
}

pub fn ln_ellipsoid_volume(stats: &GaussianStats) -> Result<f64> {
    stats.require_positive_definite()?;
    let d = stats.dim() as f64;
    let ln_det: f64 = stats.eig.eigenvalues.iter().map(|l| l.ln()).sum();
    Ok(ln_unit_ball_volume(stats.dim()) + d / 2.0 * stats.chi2()?.ln() + 0.5 * ln_det)
}

pub fn ellipsoid_volume(stats: &GaussianStats) -> Result<f64> {
    Ok(ln_ellipsoid_volume(stats)?.exp())
}

/// Edge length of the quantization cube.
pub fn hypercube_edge(stats: &GaussianStats, variant: QsurVariant) -> Result<f64> {
    stats.require_positive_definite()?;
    let chi2 = stats.chi2()?;
    let d = stats.dim();
    let mu = &stats.mu;
    let (mut hi, mut lo) = (f64::NEG_INFINITY, f64::INFINITY);
    match variant {
        QsurVariant::PrincipalAxes => {
            // Each principal axis i reaches its coordinate extremes at the
            // endpoints ±√(χ²λ_i)·q_i + μ. The cube spans the largest such
            // maximum and the smallest such minimum.
            let q = &stats.eig.eigenvectors;
            for (i, &l) in stats.eig.eigenvalues.iter().enumerate() {
                let r = (chi2 * l).sqrt();
                for j in 0..d {
                    let a = r * q.at(j, i).abs();
                    hi = hi.max(a + mu[j]);
                    lo = lo.min(-a + mu[j]);
                }
            }
        }
        QsurVariant::ExactBox => {
            for j in 0..d {
                let r = (chi2 * stats.sigma.at(j, j)).sqrt();
                hi = hi.max(mu[j] + r);
                lo = lo.min(mu[j] - r);
            }
        }
    }
    Ok(hi - lo)
}

pub fn ln_hypercube_volume(stats: &GaussianStats, variant: QsurVariant) -> Result<f64> {
    Ok(stats.dim() as f64 * hypercube_edge(stats, variant)?.ln())
}

pub fn hypercube_volume(stats: &GaussianStats, variant: QsurVariant) -> Result<f64> {
    Ok(ln_hypercube_volume(stats, variant)?.exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QsurReport {
    pub d: usize,
    pub variant: QsurVariant,
    pub alpha: f64,
    pub qsur: f64,
    pub qsur_normalized: f64,
    pub ln_v_x: f64,
    pub ln_v_s: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub v_x: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub v_s: Option<f64>,
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

pub fn qsur(stats: &GaussianStats, variant: QsurVariant) -> Result<QsurReport> {
    let ln_v_x = ln_ellipsoid_volume(stats)?;
    let ln_v_s = ln_hypercube_volume(stats, variant)?;
    let d = stats.dim();
    let ln_ratio = ln_v_x - ln_v_s;
    Ok(QsurReport {
        d,
        variant,
        alpha: stats.alpha,
        qsur: ln_ratio.exp(),
        qsur_normalized: (ln_ratio / d as f64).exp(),
        ln_v_x,
        ln_v_s,
        v_x: finite(ln_v_x.exp()),
        v_s: finite(ln_v_s.exp()),
    })
}

/// The mean-free form: `ball(d)·√∏λ_i / (2^d·(√λ₁·max|q₁|)^d)`.
pub fn qsur_simplified(stats: &GaussianStats) -> Result<f64> {
    stats.require_positive_definite()?;
    let d = stats.dim() as f64;
    let l = &stats.eig.eigenvalues;
    let q1_max = stats
        .eig
        .eigenvector(0)
        .iter()
        .fold(0.0f64, |a, v| a.max(v.abs()));
    let ln_det: f64 = l.iter().map(|v| v.ln()).sum();
    let ln_num = ln_unit_ball_volume(stats.dim()) + 0.5 * ln_det;
    let ln_den = d * (2.0f64.ln() + 0.5 * l[0].ln() + q1_max.ln());
    Ok((ln_num - ln_den).exp())
}

/// Upper bound reached by an isotropic distribution: `ball(d)/2^d`.
pub fn max_qsur(d: usize) -> f64 {
    (ln_unit_ball_volume(d) - d as f64 * 2.0f64.ln()).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloEstimate {
    pub estimate: f64,
    pub std_error: f64,
    pub samples: usize,
    pub hits: usize,
}

const MC_CHUNK: usize = 1 << 14;
pub const MIN_MC_SAMPLES: usize = 10_000;

/// Monte-Carlo estimate of QSUR.
///
/// Points are drawn uniformly from the axis-aligned bounding box of the
/// ellipsoid and tested with the Mahalanobis distance. The hit fraction
/// times the box volume estimates `V_X`, which is then divided by the
/// analytic cube volume of `variant`. Sampling from the bounding box rather
/// than the quantization cube keeps the estimator unbiased even when a cube
/// does not contain the whole ellipsoid.
///
/// Work is split into fixed-size chunks with one random stream each, so the
/// result does not depend on the number of threads.
pub fn qsur_monte_carlo(
    stats: &GaussianStats,
    variant: QsurVariant,
    n_samples: usize,
    rng: &Rng,
) -> Result<MonteCarloEstimate> {
    if n_samples < MIN_MC_SAMPLES {
        return Err(OstError::validation(format!(
            "Monte-Carlo needs at least {MIN_MC_SAMPLES} samples, got {n_samples}"
        )));
    }
    stats.require_positive_definite()?;
    let d = stats.dim();
    let chi2 = stats.chi2()?;
    let half: Vec<f64> = (0..d)
        .map(|j| (chi2 * stats.sigma.at(j, j)).sqrt())
        .collect();
    let ln_box: f64 = half.iter().map(|h| (2.0 * h).ln()).sum();
    let q = &stats.eig.eigenvectors;
    let inv_l: Vec<f64> = stats.eig.eigenvalues.iter().map(|l| 1.0 / l).collect();
    let chunks = n_samples.div_ceil(MC_CHUNK);
    let hits: usize = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut r = rng.split(c as u64);
            let n = MC_CHUNK.min(n_samples - c * MC_CHUNK);
            let mut y = vec![0.0; d];
            let mut count = 0usize;
            for _ in 0..n {
                // Centered at μ, which the distance test subtracts anyway.
                for j in 0..d {
                    y[j] = half[j] * (2.0 * r.uniform() - 1.0);
                }
                // Mahalanobis distance through the eigenbasis.
                let mut m = 0.0;
                for i in 0..d {
                    let mut z = 0.0;
                    for j in 0..d {
                        z += q.at(j, i) * y[j];
                    }
                    m += z * z * inv_l[i];
                }
                if m <= chi2 {
                    count += 1;
                }
            }
            count
        })
        .sum();
    let p = hits as f64 / n_samples as f64;
    let factor = (ln_box - ln_hypercube_volume(stats, variant)?).exp();
    Ok(MonteCarloEstimate {
        estimate: p * factor,
        std_error: (p * (1.0 - p) / n_samples as f64).sqrt() * factor,
        samples: n_samples,
        hits,
    })
}
