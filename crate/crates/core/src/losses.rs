//! Distillation losses between full-precision and quantized logits.

use serde::{Deserialize, Serialize};

use crate::error::{OstError, Result};
use crate::tensor_core::Tensor;

/// Probability floor applied before taking a logarithm of a quantized
/// probability.
pub const PROB_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    KlTop,
    CrossEntropy,
    FullKl,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub kind: LossKind,
    /// Number of full-precision classes kept by the top-k loss; clamped to
    /// the vocabulary size.
    pub k: usize,
    /// Renormalize both distributions over the selected classes.
    pub renormalize: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::KlTop,
            k: 1000,
            renormalize: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(OstError::validation("loss.k must be at least 1"));
        }
        Ok(())
    }

    pub fn effective_k(&self, vocab: usize) -> usize {
        self.k.min(vocab)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossDiagnostics {
    /// Selected quantized probabilities that fell below [`PROB_FLOOR`].
    pub underflows: usize,
    /// Mean full-precision mass covered by the selected classes.
    pub selected_mass: f64,
}

fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    log_softmax(z).into_iter().map(f64::exp).collect()
}

/// Indices of the `k` largest entries, ties broken toward the lower index.
pub fn top_k_indices(p: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

fn check_pair(z_fp: &Tensor, z_q: &Tensor) -> Result<()> {
    if z_fp.ndim() != 2 || z_fp.shape() != z_q.shape() {
        return Err(OstError::validation(format!(
            "logit shapes {:?} and {:?} must be equal matrices",
            z_fp.shape(),
            z_q.shape()
        )));
    }
    if z_fp.rows() == 0 || z_fp.cols() == 0 {
        return Err(OstError::validation("logits must be non-empty"));
    }
    if !z_fp.is_finite() || !z_q.is_finite() {
        return Err(OstError::numerical("logits contain non-finite values"));
    }
    Ok(())
}

/// Loss and gradient of one row.
fn kl_top_row(
    zf: &[f64],
    zq: &[f64],
    k: usize,
    renormalize: bool,
    diag: &mut LossDiagnostics,
) -> (f64, Vec<f64>) {
    let lp = log_softmax(zf);
    let lq = log_softmax(zq);
    let p: Vec<f64> = lp.iter().map(|v| v.exp()).collect();
    let q: Vec<f64> = lq.iter().map(|v| v.exp()).collect();
    let sel = top_k_indices(&p, k);
    let mass: f64 = sel.iter().map(|&i| p[i]).sum();
    diag.selected_mass += mass;
    let mut grad = vec![0.0; zf.len()];
    if renormalize {
        let qmass: f64 = sel.iter().map(|&i| q[i]).sum();
        let (lpm, lqm) = (mass.ln(), qmass.max(PROB_FLOOR).ln());
        let mut loss = 0.0;
        for &i in &sel {
            let pt = p[i] / mass;
            loss += pt * ((lp[i] - lpm) - (lq[i] - lqm));
            grad[i] = q[i] / qmass.max(PROB_FLOOR) - pt;
        }
        return (loss, grad);
    }
    let ln_floor = PROB_FLOOR.ln();
    let mut loss = 0.0;
    let mut live_mass = 0.0;
    for &i in &sel {
        if lq[i] < ln_floor {
            diag.underflows += 1;
            loss += p[i] * (lp[i] - ln_floor);
            continue;
        }
        loss += p[i] * (lp[i] - lq[i]);
        grad[i] -= p[i];
        live_mass += p[i];
    }
    for (g, qj) in grad.iter_mut().zip(&q) {
        *g += live_mass * qj;
    }
    (loss, grad)
}

fn kl_top_impl(
    z_fp: &Tensor,
    z_q: &Tensor,
    k: usize,
    renormalize: bool,
) -> Result<(f64, Tensor, LossDiagnostics)> {
    check_pair(z_fp, z_q)?;
    if k == 0 {
        return Err(OstError::validation("k must be at least 1"));
    }
    let (rows, v) = (z_fp.rows(), z_fp.cols());
    let k = k.min(v);
    let mut diag = LossDiagnostics::default();
    let mut grad = Tensor::zeros(&[rows, v]);
    let mut loss = 0.0;
    for r in 0..rows {
        let (l, g) = kl_top_row(z_fp.row(r), z_q.row(r), k, renormalize, &mut diag);
        loss += l;
        for (dst, src) in grad.row_mut(r).iter_mut().zip(g) {
            *dst = src / rows as f64;
        }
    }
    diag.selected_mass /= rows as f64;
    Ok((loss / rows as f64, grad, diag))
}

/// Mean over rows of `Σ_{i∈top-k(p)} p_i·ln(p_i/p̂_i)` with `p`, `p̂` the
/// softmax over the full vocabulary; the selected masses are not
/// renormalized.
pub fn kl_top(z_fp: &Tensor, z_q: &Tensor, k: usize) -> Result<f64> {
    Ok(kl_top_impl(z_fp, z_q, k, false)?.0)
}

/// Gradient of [`kl_top`] with respect to `z_q`.
pub fn kl_top_grad(z_fp: &Tensor, z_q: &Tensor, k: usize) -> Result<Tensor> {
    Ok(kl_top_impl(z_fp, z_q, k, false)?.1)
}

/// Loss, gradient and diagnostics; `renormalize` selects the variant that
/// rescales both distributions to unit mass over the selected classes.
pub fn kl_top_full(
    z_fp: &Tensor,
    z_q: &Tensor,
    k: usize,
    renormalize: bool,
) -> Result<(f64, Tensor, LossDiagnostics)> {
    kl_top_impl(z_fp, z_q, k, renormalize)
}

/// Mean KL divergence over the whole vocabulary.
pub fn full_kl(z_fp: &Tensor, z_q: &Tensor) -> Result<f64> {
    check_pair(z_fp, z_q)?;
    let mut total = 0.0;
    for r in 0..z_fp.rows() {
        let lp = log_softmax(z_fp.row(r));
        let lq = log_softmax(z_q.row(r));
        total += lp
            .iter()
            .zip(&lq)
            .map(|(a, b)| a.exp() * (a - b))
            .sum::<f64>();
    }
    Ok(total / z_fp.rows() as f64)
}

/// Gradient of [`full_kl`]: `(p̂ − p)/rows`.
pub fn full_kl_grad(z_fp: &Tensor, z_q: &Tensor) -> Result<Tensor> {
    check_pair(z_fp, z_q)?;
    let rows = z_fp.rows();
    let mut g = Tensor::zeros(z_fp.shape());
    for r in 0..rows {
        let (p, q) = (softmax(z_fp.row(r)), softmax(z_q.row(r)));
        for (dst, (a, b)) in g.row_mut(r).iter_mut().zip(p.iter().zip(&q)) {
            *dst = (b - a) / rows as f64;
        }
    }
    Ok(g)
}

fn check_labels(z: &Tensor, labels: &[usize]) -> Result<()> {
    if z.ndim() != 2 || z.rows() != labels.len() || z.rows() == 0 {
        return Err(OstError::validation(format!(
            "{} labels for logits of shape {:?}",
            labels.len(),
            z.shape()
        )));
    }
    if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= z.cols()) {
        return Err(OstError::validation(format!(
            "label {l} at row {i} is outside the vocabulary of {}",
            z.cols()
        )));
    }
    if !z.is_finite() {
        return Err(OstError::numerical("logits contain non-finite values"));
    }
    Ok(())
}

/// Mean negative log-likelihood of `labels`.
pub fn cross_entropy(z_q: &Tensor, labels: &[usize]) -> Result<f64> {
    check_labels(z_q, labels)?;
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(r, &l)| -log_softmax(z_q.row(r))[l])
        .sum();
    Ok(total / labels.len() as f64)
}

pub fn cross_entropy_grad(z_q: &Tensor, labels: &[usize]) -> Result<Tensor> {
    check_labels(z_q, labels)?;
    let n = labels.len() as f64;
    let mut g = Tensor::zeros(z_q.shape());
    for (r, &l) in labels.iter().enumerate() {
        let row = g.row_mut(r);
        for (dst, q) in row.iter_mut().zip(softmax(z_q.row(r))) {
            *dst = q / n;
        }
        row[l] -= 1.0 / n;
    }
    Ok(g)
}

/// Loss and gradient for one sequence. Cross-entropy uses next-token labels
/// from `tokens`, so the last position carries no gradient.
pub fn sequence_loss(
    cfg: &LossConfig,
    z_fp: &Tensor,
    z_q: &Tensor,
    tokens: &[usize],
) -> Result<(f64, Tensor, LossDiagnostics)> {
    match cfg.kind {
        LossKind::KlTop => kl_top_impl(z_fp, z_q, cfg.k, cfg.renormalize),
        LossKind::FullKl => Ok((
            full_kl(z_fp, z_q)?,
            full_kl_grad(z_fp, z_q)?,
            LossDiagnostics::default(),
        )),
        LossKind::CrossEntropy => {
            let t = z_q.rows();
            if tokens.len() != t || t < 2 {
                return Err(OstError::validation(
                    "cross-entropy needs at least two tokens per sequence",
                ));
            }
            let head = z_q.block(0, 0, t - 1, z_q.cols());
            let labels = &tokens[1..];
            let g = cross_entropy_grad(&head, labels)?;
            let mut full = Tensor::zeros(z_q.shape());
            full.set_block(0, 0, &g);
            Ok((
                cross_entropy(&head, labels)?,
                full,
                LossDiagnostics::default(),
            ))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_core::Rng;
    use proptest::prelude::*;

    fn logits_of(p: &[f64]) -> Tensor {
        Tensor::matrix(1, p.len(), p.iter().map(|v| v.ln()).collect())
    }

    #[test]
    fn hand_value_three_classes() {
        let l = kl_top(
            &logits_of(&[0.7, 0.2, 0.1]),
            &logits_of(&[0.6, 0.3, 0.1]),
            2,
        )
        .unwrap();
        let want = 0.7 * (7.0f64 / 6.0).ln() + 0.2 * (2.0f64 / 3.0).ln();
        assert!((l - want).abs() < 1e-15);
        assert!((l - 0.0268125).abs() < 1e-6);
    }

    #[test]
    fn zero_at_identity() {
        let mut rng = Rng::new(1);
        let z = Tensor::matrix(4, 16, rng.normal_vec(64));
        for k in [1, 5, 16, 1000] {
            assert!(kl_top(&z, &z, k).unwrap().abs() < 1e-15);
        }
    }

    #[test]
    fn whole_vocabulary_is_full_kl() {
        let mut rng = Rng::new(2);
        let a = Tensor::matrix(5, 32, rng.normal_vec(160));
        let b = Tensor::matrix(5, 32, rng.normal_vec(160));
        assert!((kl_top(&a, &b, 32).unwrap() - full_kl(&a, &b).unwrap()).abs() < 1e-12);
        assert!((kl_top(&a, &b, 5000).unwrap() - full_kl(&a, &b).unwrap()).abs() < 1e-12);
        let g = kl_top_grad(&a, &b, 32).unwrap();
        assert!(g.max_abs_diff(&full_kl_grad(&a, &b).unwrap()) < 1e-10);
    }

    #[test]
    fn ties_prefer_lower_index() {
        assert_eq!(top_k_indices(&[0.2, 0.4, 0.2, 0.2], 2), vec![1, 0]);
        assert_eq!(top_k_indices(&[0.25; 4], 3), vec![0, 1, 2]);
    }

    fn fd_check(f: impl Fn(&Tensor) -> f64, g: &Tensor, z: &Tensor) -> f64 {
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for i in 0..z.len() {
            let (mut a, mut b) = (z.clone(), z.clone());
            a.data_mut()[i] += h;
            b.data_mut()[i] -= h;
            let fd = (f(&a) - f(&b)) / (2.0 * h);
            worst = worst
                .max((fd - g.data()[i]).abs() / (1e-7 + fd.abs().max(g.data()[i].abs())).max(1e-4));
        }
        worst
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = Rng::new(3);
        for trial in 0..20 {
            let a = Tensor::matrix(8, 64, rng.normal_vec(512).iter().map(|v| 2.0 * v).collect());
            let b = a.add(&Tensor::matrix(8, 64, rng.normal_vec(512)).scale(0.5));
            let k = [1, 10, 64][trial % 3];
            let g = kl_top_grad(&a, &b, k).unwrap();
            assert!(fd_check(|z| kl_top(&a, z, k).unwrap(), &g, &b) < 1e-5);
            let (_, gr, _) = kl_top_full(&a, &b, k, true).unwrap();
            assert!(fd_check(|z| kl_top_full(&a, z, k, true).unwrap().0, &gr, &b) < 1e-5);
        }
        // At identity only the unselected coordinates move the loss.
        let a = Tensor::matrix(2, 8, rng.normal_vec(16));
        let g = kl_top_grad(&a, &a, 3).unwrap();
        assert!(fd_check(|z| kl_top(&a, z, 3).unwrap(), &g, &a) < 1e-6);
    }

    #[test]
    fn unrenormalized_partial_sum_can_be_negative() {
        let l = kl_top(&logits_of(&[0.5, 0.5]), &logits_of(&[0.9, 0.1]), 1).unwrap();
        assert!((l - 0.5 * (0.5f64 / 0.9).ln()).abs() < 1e-15);
        assert!(l < 0.0);
        let (r, _, _) =
            kl_top_full(&logits_of(&[0.5, 0.5]), &logits_of(&[0.9, 0.1]), 1, true).unwrap();
        assert!(r.abs() < 1e-15);
    }

    #[test]
    fn underflow_is_flagged() {
        let zf = Tensor::matrix(1, 3, vec![0.0, 0.0, 0.0]);
        let zq = Tensor::matrix(1, 3, vec![0.0, -800.0, 0.0]);
        let (l, g, d) = kl_top_full(&zf, &zq, 3, false).unwrap();
        assert_eq!(d.underflows, 1);
        assert!(l.is_finite() && g.is_finite());
    }

    #[test]
    fn cross_entropy_hand_values() {
        let u = Tensor::matrix(1, 4, vec![0.3; 4]);
        assert!((cross_entropy(&u, &[2]).unwrap() - 4f64.ln()).abs() < 1e-15);
        let z = Tensor::matrix(1, 2, vec![1.0, 0.0]);
        assert!((cross_entropy(&z, &[0]).unwrap() - 0.313262).abs() < 1e-6);
        let sharp = Tensor::matrix(1, 3, vec![60.0, 0.0, 0.0]);
        assert!(cross_entropy(&sharp, &[0]).unwrap() < 1e-20);
        assert!(cross_entropy(&z, &[2]).is_err());
        let mut rng = Rng::new(5);
        let z = Tensor::matrix(3, 5, rng.normal_vec(15));
        let g = cross_entropy_grad(&z, &[1, 4, 0]).unwrap();
        assert!(fd_check(|x| cross_entropy(x, &[1, 4, 0]).unwrap(), &g, &z) < 1e-6);
    }

    #[test]
    fn rejects_mismatched_shapes() {
        let a = Tensor::matrix(2, 3, vec![0.0; 6]);
        let b = Tensor::matrix(3, 2, vec![0.0; 6]);
        assert!(kl_top(&a, &b, 1).is_err());
        assert!(kl_top(&a, &a, 0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn shift_invariance(zf in prop::collection::vec(-5.0..5.0f64, 12), zq in prop::collection::vec(-5.0..5.0f64, 12), c in -50.0..50.0f64, k in 1usize..12) {
            let a = Tensor::matrix(2, 6, zf);
            let b = Tensor::matrix(2, 6, zq);
            let bs = b.map(|v| v + c);
            let (l0, g0) = (kl_top(&a, &b, k).unwrap(), kl_top_grad(&a, &b, k).unwrap());
            let (l1, g1) = (kl_top(&a.map(|v| v - c), &bs, k).unwrap(), kl_top_grad(&a, &bs, k).unwrap());
            prop_assert!((l0 - l1).abs() < 1e-10);
            prop_assert!(g0.max_abs_diff(&g1) < 1e-10);
            prop_assert!(l0 >= -1e-12 || k < 6);
        }

        #[test]
        fn more_classes_more_terms(z in prop::collection::vec(-3.0..3.0f64, 10), k in 1usize..10) {
            let p = softmax(&z);
            let a = top_k_indices(&p, k);
            let b = top_k_indices(&p, k + 1);
            prop_assert!(b.len() >= a.len());
            prop_assert_eq!(&b[..a.len()], &a[..]);
        }
    }
}
