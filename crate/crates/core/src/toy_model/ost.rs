//! Learnable transform parameters and their exact fusion into the weights.
//!
//! Row convention: the residual stream `h` is carried as `h·R` after
//! fusion. With output-major weights (`y = x·Wᵀ`) this gives
//!
//! ```text
//! E'     = E·R                     head'  = head·R
//! γ_a'   = γ_a ⊙ s_a               γ_f'   = γ_f ⊙ s_f
//! Wq'    = diag(f)·Wq·R·diag(1/s_a)
//! Wk'    = diag(1/f)·Wk·R·diag(1/s_a)
//! Wv'_h  = diag(σ_h)·R_hᵀ·(Wv·R·diag(1/s_a))_h        (rows of head h)
//! Wo'_h  = (Rᵀ·Wo)_h·R_h·diag(1/σ_h)                   (columns of head h)
//! Wup'   = Wup·R·diag(1/s_f)       Wgate' = Wgate·R·diag(1/s_f)
//! Wdown' = Rᵀ·Wdown·H
//! ```
//!
//! where `f` is the query/key scale (constant on each rotary pair, shared
//! by all heads), `R_h`/`σ_h` the per-head value/output pair and `H` the
//! feed-forward Hadamard, applied online to the hidden state.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::forward::ModelGrads;
use super::model::{read_json, write_json, ManifestEntry, ToyModel};
use super::ToyConfig;
use crate::error::{OstError, Result};
use crate::stiefel::{ScaleParam, StiefelParam};
use crate::tensor_core::{hadamard, read_tensor, write_tensor, Rng, Tensor};
use crate::transforms::random_orthogonal;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerOst {
    /// Scale on the attention-side norm output.
    pub s_attn: ScaleParam,
    /// Scale on the feed-forward-side norm output.
    pub s_ffn: ScaleParam,
    /// Query/key scale, one value per rotary pair (`head_dim/2`).
    pub s_qk: ScaleParam,
    pub r_ov: Vec<StiefelParam>,
    pub s_ov: Vec<ScaleParam>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OstParams {
    /// Residual rotation shared by every layer.
    pub r_res: StiefelParam,
    pub layers: Vec<LayerOst>,
    pub qk_hadamard: bool,
    pub ffn_hadamard: bool,
}

impl OstParams {
    /// Identity transforms and no Hadamards.
    pub fn identity(cfg: &ToyConfig) -> Self {
        let (d, hd, nh) = (cfg.d_model, cfg.head_dim, cfg.n_heads);
        Self {
            r_res: StiefelParam::identity(d),
            layers: (0..cfg.n_layers)
                .map(|_| LayerOst {
                    s_attn: ScaleParam::ones(d),
                    s_ffn: ScaleParam::ones(d),
                    s_qk: ScaleParam::ones(hd / 2),
                    r_ov: (0..nh).map(|_| StiefelParam::identity(hd)).collect(),
                    s_ov: (0..nh).map(|_| ScaleParam::ones(hd)).collect(),
                })
                .collect(),
            qk_hadamard: false,
            ffn_hadamard: false,
        }
    }

    /// Random rotations, log-normal scales with spread `scale_spread`, both
    /// Hadamards on.
    pub fn random(cfg: &ToyConfig, rng: &mut Rng, scale_spread: f64) -> Self {
        let mut p = Self::identity(cfg);
        let logs = |n: usize, rng: &mut Rng| {
            ScaleParam::from_log(rng.normal_vec(n).iter().map(|v| v * scale_spread).collect())
        };
        p.r_res = StiefelParam::new(random_orthogonal(cfg.d_model, rng)).expect("orthogonal");
        for l in &mut p.layers {
            l.s_attn = logs(cfg.d_model, rng);
            l.s_ffn = logs(cfg.d_model, rng);
            l.s_qk = logs(cfg.head_dim / 2, rng);
            for h in 0..cfg.n_heads {
                l.r_ov[h] =
                    StiefelParam::new(random_orthogonal(cfg.head_dim, rng)).expect("orthogonal");
                l.s_ov[h] = logs(cfg.head_dim, rng);
            }
        }
        p.qk_hadamard = true;
        p.ffn_hadamard = true;
        p
    }

    /// `S_attn` and `S_ffn` double as the residual-path scales.
    pub fn s_res(&self, layer: usize) -> (&ScaleParam, &ScaleParam) {
        (&self.layers[layer].s_attn, &self.layers[layer].s_ffn)
    }

    pub fn check_shape(&self, cfg: &ToyConfig) -> Result<()> {
        let bad = |what: &str| {
            Err(OstError::validation(format!(
                "transform parameters do not fit the model: {what}"
            )))
        };
        if self.r_res.dim() != cfg.d_model {
            return bad("R_res dimension");
        }
        if self.layers.len() != cfg.n_layers {
            return bad("layer count");
        }
        for l in &self.layers {
            if l.s_attn.dim() != cfg.d_model
                || l.s_ffn.dim() != cfg.d_model
                || l.s_qk.dim() != cfg.head_dim / 2
            {
                return bad("scale length");
            }
            if l.r_ov.len() != cfg.n_heads || l.s_ov.len() != cfg.n_heads {
                return bad("head count");
            }
            if l.r_ov.iter().any(|r| r.dim() != cfg.head_dim)
                || l.s_ov.iter().any(|s| s.dim() != cfg.head_dim)
            {
                return bad("head dimension");
            }
        }
        Ok(())
    }

    /// Largest `‖OᵀO − I‖_F` over all orthogonal members.
    pub fn max_ortho_residual(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.r_ov.iter())
            .map(|r| r.residual())
            .fold(self.r_res.residual(), f64::max)
    }
}

/// Expand the per-pair query/key scale to a full `d_model` row scale.
fn qk_row_scale(s_qk: &[f64], n_heads: usize) -> Vec<f64> {
    let per_head: Vec<f64> = s_qk.iter().flat_map(|&v| [v, v]).collect();
    (0..n_heads)
        .flat_map(|_| per_head.iter().copied())
        .collect()
}

fn recip(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| 1.0 / x).collect()
}

fn is_identity(t: &Tensor) -> bool {
    t.max_abs_diff(&Tensor::eye(t.rows())) == 0.0
}

/// Fuse `ost` into `model`, giving a plain model whose full-precision output
/// matches `model`'s.
///
/// A non-identity `R_res` only commutes with the norms when they have unit
/// weight, so it needs a folded model.
pub fn fuse(model: &ToyModel, ost: &OstParams) -> Result<ToyModel> {
    let cfg = &model.config;
    ost.check_shape(cfg)?;
    let r = &ost.r_res.value;
    if !is_identity(r) && !model.is_folded() {
        return Err(OstError::Precondition(
            "norm weights must be folded (fold_rmsnorm) before fusing a residual rotation".into(),
        ));
    }
    let (hd, nh, f) = (cfg.head_dim, cfg.n_heads, cfg.ffn_dim);
    let mut out = model.clone();
    out.embedding = model.embedding.matmul(r);
    out.head = model.head.matmul(r);
    let h_ffn = (ost.ffn_hadamard && !model.ffn_hadamard)
        .then(|| hadamard(f))
        .transpose()?;
    for (l, (src, p)) in out
        .layers
        .iter_mut()
        .zip(model.layers.iter().zip(&ost.layers))
    {
        let sa = p.s_attn.scale();
        let sf = p.s_ffn.scale();
        let fq = qk_row_scale(&p.s_qk.scale(), nh);
        let (isa, isf) = (recip(&sa), recip(&sf));
        l.norm_attn = src.norm_attn.iter().zip(&sa).map(|(g, s)| g * s).collect();
        l.norm_ffn = src.norm_ffn.iter().zip(&sf).map(|(g, s)| g * s).collect();
        l.wq = src.wq.matmul(r).scale_columns(&isa).scale_rows(&fq);
        l.wk = src.wk.matmul(r).scale_columns(&isa).scale_rows(&recip(&fq));
        let b = src.wv.matmul(r).scale_columns(&isa);
        let c = r.t_matmul(&src.wo);
        for h in 0..nh {
            let (rov, sov) = (&p.r_ov[h].value, p.s_ov[h].scale());
            let vh = rov
                .t_matmul(&b.block(h * hd, 0, hd, b.cols()))
                .scale_rows(&sov);
            l.wv.set_block(h * hd, 0, &vh);
            let oh = c
                .block(0, h * hd, c.rows(), hd)
                .matmul(rov)
                .scale_columns(&recip(&sov));
            l.wo.set_block(0, h * hd, &oh);
        }
        l.wup = src.wup.matmul(r).scale_columns(&isf);
        l.wgate = src.wgate.matmul(r).scale_columns(&isf);
        let down = r.t_matmul(&src.wdown);
        l.wdown = match &h_ffn {
            Some(h) => down.matmul(h),
            None => down,
        };
    }
    out.qk_hadamard = model.qk_hadamard || ost.qk_hadamard;
    out.ffn_hadamard = model.ffn_hadamard || ost.ffn_hadamard;
    Ok(out)
}

/// Gradients of a loss with respect to the transform parameters: Euclidean
/// for the rotations, with respect to the log-scale for the scales.
#[derive(Debug, Clone, PartialEq)]
pub struct OstGrads {
    pub r_res: Tensor,
    pub layers: Vec<LayerOstGrads>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerOstGrads {
    pub s_attn: Vec<f64>,
    pub s_ffn: Vec<f64>,
    pub s_qk: Vec<f64>,
    pub r_ov: Vec<Tensor>,
    pub s_ov: Vec<Vec<f64>>,
}

fn col_sums_of_product(g: &Tensor, w: &Tensor) -> Vec<f64> {
    let c = w.cols();
    let mut out = vec![0.0; c];
    for (gr, wr) in g.data().chunks(c).zip(w.data().chunks(c)) {
        for j in 0..c {
            out[j] += gr[j] * wr[j];
        }
    }
    out
}

fn row_sums_of_product(g: &Tensor, w: &Tensor) -> Vec<f64> {
    let c = w.cols();
    g.data()
        .chunks(c)
        .zip(w.data().chunks(c))
        .map(|(gr, wr)| gr.iter().zip(wr).map(|(a, b)| a * b).sum())
        .collect()
}

/// Chain rule through [`fuse`]. `model` is the model that was fused and
/// `fused` the result; `g` holds gradients with respect to `fused`'s
/// parameters.
pub fn fuse_backward(
    model: &ToyModel,
    ost: &OstParams,
    fused: &ToyModel,
    g: &ModelGrads,
) -> OstGrads {
    let cfg = &model.config;
    let (hd, nh, f) = (cfg.head_dim, cfg.n_heads, cfg.ffn_dim);
    let r = &ost.r_res.value;
    let h_ffn = (ost.ffn_hadamard && !model.ffn_hadamard)
        .then(|| hadamard(f).expect("ffn_dim is a power of two"));
    let mut dr = model.embedding.t_matmul(&g.embedding);
    dr.add_assign(&model.head.t_matmul(&g.head));
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for (li, (src, p)) in model.layers.iter().zip(&ost.layers).enumerate() {
        let (fl, gl) = (&fused.layers[li], &g.layers[li]);
        let sa = p.s_attn.scale();
        let sf = p.s_ffn.scale();
        let fq = qk_row_scale(&p.s_qk.scale(), nh);
        let (isa, isf) = (recip(&sa), recip(&sf));

        dr.add_assign(&src.wq.t_matmul(&gl.wq.scale_rows(&fq).scale_columns(&isa)));
        dr.add_assign(
            &src.wk
                .t_matmul(&gl.wk.scale_rows(&recip(&fq)).scale_columns(&isa)),
        );
        // Wv' = M·(Wv·R·diag(1/s_a)) with M block-diagonal.
        let b = src.wv.matmul(r).scale_columns(&isa);
        let c = r.t_matmul(&src.wo);
        let mut mt_g = Tensor::zeros(gl.wv.shape());
        let mut wo_n = Tensor::zeros(src.wo.shape());
        let mut r_ov = Vec::with_capacity(nh);
        let mut s_ov = Vec::with_capacity(nh);
        for h in 0..nh {
            let (rov, sov) = (&p.r_ov[h].value, p.s_ov[h].scale());
            let isov = recip(&sov);
            let gv_h = gl.wv.block(h * hd, 0, hd, gl.wv.cols());
            mt_g.set_block(h * hd, 0, &rov.matmul(&gv_h.scale_rows(&sov)));
            wo_n.set_block(
                0,
                h * hd,
                &src.wo
                    .block(0, h * hd, src.wo.rows(), hd)
                    .matmul(rov)
                    .scale_columns(&isov),
            );

            let b_h = b.block(h * hd, 0, hd, b.cols());
            let go_h = gl.wo.block(0, h * hd, gl.wo.rows(), hd);
            let c_h = c.block(0, h * hd, c.rows(), hd);
            let mut d_rov = b_h.matmul_t(&gv_h).scale_columns(&sov);
            d_rov.add_assign(&c_h.t_matmul(&go_h).scale_columns(&isov));
            r_ov.push(d_rov);

            let wv_h = fl.wv.block(h * hd, 0, hd, fl.wv.cols());
            let wo_h = fl.wo.block(0, h * hd, fl.wo.rows(), hd);
            let up = row_sums_of_product(&gv_h, &wv_h);
            let down = col_sums_of_product(&go_h, &wo_h);
            s_ov.push(up.iter().zip(&down).map(|(a, b)| a - b).collect());
        }
        dr.add_assign(&src.wv.t_matmul(&mt_g.scale_columns(&isa)));
        dr.add_assign(&wo_n.matmul_t(&gl.wo));
        dr.add_assign(&src.wup.t_matmul(&gl.wup.scale_columns(&isf)));
        dr.add_assign(&src.wgate.t_matmul(&gl.wgate.scale_columns(&isf)));
        let down_src = match &h_ffn {
            Some(h) => src.wdown.matmul(h),
            None => src.wdown.clone(),
        };
        dr.add_assign(&down_src.matmul_t(&gl.wdown));

        let mut s_attn: Vec<f64> = gl
            .norm_attn
            .iter()
            .zip(&fl.norm_attn)
            .map(|(a, b)| a * b)
            .collect();
        for (gw, w) in [(&gl.wq, &fl.wq), (&gl.wk, &fl.wk), (&gl.wv, &fl.wv)] {
            for (s, v) in s_attn.iter_mut().zip(col_sums_of_product(gw, w)) {
                *s -= v;
            }
        }
        let mut s_ffn: Vec<f64> = gl
            .norm_ffn
            .iter()
            .zip(&fl.norm_ffn)
            .map(|(a, b)| a * b)
            .collect();
        for (gw, w) in [(&gl.wup, &fl.wup), (&gl.wgate, &fl.wgate)] {
            for (s, v) in s_ffn.iter_mut().zip(col_sums_of_product(gw, w)) {
                *s -= v;
            }
        }
        let rq = row_sums_of_product(&gl.wq, &fl.wq);
        let rk = row_sums_of_product(&gl.wk, &fl.wk);
        let mut s_qk = vec![0.0; hd / 2];
        for (row, (a, b)) in rq.iter().zip(&rk).enumerate() {
            s_qk[(row % hd) / 2] += a - b;
        }
        layers.push(LayerOstGrads {
            s_attn,
            s_ffn,
            s_qk,
            r_ov,
            s_ov,
        });
    }
    OstGrads { r_res: dr, layers }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OstManifest {
    kind: String,
    d_model: usize,
    n_heads: usize,
    head_dim: usize,
    n_layers: usize,
    qk_hadamard: bool,
    ffn_hadamard: bool,
    tensors: Vec<ManifestEntry>,
}

impl OstParams {
    /// Named tensors in manifest order; scales are stored realized (not as
    /// logarithms).
    pub fn named_tensors(&self) -> Vec<(String, &'static str, Tensor)> {
        let mut out = vec![("r_res".to_string(), "orthogonal", self.r_res.value.clone())];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((
                format!("layer{i}.s_attn"),
                "scale",
                Tensor::vector(l.s_attn.scale()),
            ));
            out.push((
                format!("layer{i}.s_ffn"),
                "scale",
                Tensor::vector(l.s_ffn.scale()),
            ));
            out.push((
                format!("layer{i}.s_qk"),
                "scale",
                Tensor::vector(l.s_qk.scale()),
            ));
            for (h, (r, s)) in l.r_ov.iter().zip(&l.s_ov).enumerate() {
                out.push((format!("layer{i}.r_ov.h{h}"), "orthogonal", r.value.clone()));
                out.push((
                    format!("layer{i}.s_ov.h{h}"),
                    "scale",
                    Tensor::vector(s.scale()),
                ));
            }
        }
        out
    }

    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| OstError::io(dir, e))?;
        let mut tensors = Vec::new();
        for (name, role, t) in self.named_tensors() {
            let file = format!("{name}.ostt");
            write_tensor(dir.join(&file), &t)?;
            tensors.push(ManifestEntry {
                name,
                file,
                shape: t.shape().to_vec(),
                role: role.into(),
            });
        }
        let first = self.layers.first();
        let manifest = OstManifest {
            kind: "ost_params".into(),
            d_model: self.r_res.dim(),
            n_heads: first.map_or(0, |l| l.r_ov.len()),
            head_dim: first.and_then(|l| l.r_ov.first()).map_or(0, |r| r.dim()),
            n_layers: self.layers.len(),
            qk_hadamard: self.qk_hadamard,
            ffn_hadamard: self.ffn_hadamard,
            tensors,
        };
        write_json(&dir.join("manifest.json"), &manifest)
    }

    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let m: OstManifest = read_json(&dir.join("manifest.json"))?;
        if m.kind != "ost_params" {
            return Err(OstError::validation(format!(
                "manifest kind {:?} is not a parameter set",
                m.kind
            )));
        }
        let cfg = ToyConfig {
            d_model: m.d_model,
            n_heads: m.n_heads,
            head_dim: m.head_dim,
            n_layers: m.n_layers,
            ..ToyConfig::default()
        };
        let mut p = OstParams::identity(&cfg);
        p.qk_hadamard = m.qk_hadamard;
        p.ffn_hadamard = m.ffn_hadamard;
        let names: Vec<String> = p.named_tensors().into_iter().map(|(n, _, _)| n).collect();
        if names.len() != m.tensors.len() || names.iter().zip(&m.tensors).any(|(a, e)| a != &e.name)
        {
            return Err(OstError::validation(
                "parameter manifest does not list the expected tensors",
            ));
        }
        let load = |i: usize| read_tensor(dir.join(&m.tensors[i].file));
        let mut i = 0;
        let mut next = || {
            i += 1;
            load(i - 1)
        };
        p.r_res = StiefelParam::new(next()?)?;
        for l in &mut p.layers {
            l.s_attn = ScaleParam::from_scale(next()?.data())?;
            l.s_ffn = ScaleParam::from_scale(next()?.data())?;
            l.s_qk = ScaleParam::from_scale(next()?.data())?;
            for h in 0..l.r_ov.len() {
                l.r_ov[h] = StiefelParam::new(next()?)?;
                l.s_ov[h] = ScaleParam::from_scale(next()?.data())?;
            }
        }
        p.check_shape(&cfg)?;
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy_model::forward::{forward_quantized, ModelGrads};

    fn small() -> ToyConfig {
        ToyConfig {
            d_model: 16,
            n_heads: 2,
            head_dim: 8,
            ffn_dim: 32,
            vocab: 24,
            seq_len: 6,
            n_layers: 2,
            ..ToyConfig::default()
        }
    }

    #[test]
    fn identity_fusion_is_exact() {
        let m = ToyModel::init(&ToyConfig::default(), &Rng::new(1))
            .unwrap()
            .fold_rmsnorm();
        let f = fuse(&m, &OstParams::identity(&m.config)).unwrap();
        assert_eq!(f, m);
        // Unfolded models accept scale-only parameters.
        let raw = ToyModel::init(&ToyConfig::default(), &Rng::new(1)).unwrap();
        assert_eq!(fuse(&raw, &OstParams::identity(&raw.config)).unwrap(), raw);
    }

    #[test]
    fn rotation_needs_folded_norms() {
        let raw = ToyModel::init(&small(), &Rng::new(1)).unwrap();
        let p = OstParams::random(&raw.config, &mut Rng::new(2), 0.3);
        assert!(matches!(fuse(&raw, &p), Err(OstError::Precondition(_))));
    }

    #[test]
    fn fusing_identity_after_fusing_changes_nothing() {
        let m = ToyModel::init(&small(), &Rng::new(1))
            .unwrap()
            .fold_rmsnorm();
        let p = OstParams::random(&m.config, &mut Rng::new(2), 0.3);
        let once = fuse(&m, &p).unwrap();
        let twice = fuse(&once, &OstParams::identity(&m.config)).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn fused_model_matches_the_original() {
        for seed in 0..3 {
            let raw = ToyModel::init(&ToyConfig::default(), &Rng::new(seed)).unwrap();
            let tokens: Vec<usize> = (0..32).map(|i| (i * 29 + seed as usize) % 256).collect();
            let fp = forward_quantized(&raw, &tokens, None).unwrap().logits;
            let p = OstParams::random(&raw.config, &mut Rng::new(100 + seed), 0.3);
            let fused = fuse(&raw.fold_rmsnorm(), &p).unwrap();
            let out = forward_quantized(&fused, &tokens, None).unwrap().logits;
            assert!(
                out.max_abs_diff(&fp) <= 1e-8 * fp.max_abs(),
                "{}",
                out.max_abs_diff(&fp)
            );
        }
    }

    fn inner(a: &ModelGrads, b: &ToyModel) -> f64 {
        let dot = |x: &Tensor, y: &Tensor| {
            x.data()
                .iter()
                .zip(y.data())
                .map(|(p, q)| p * q)
                .sum::<f64>()
        };
        let vdot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
        let mut s = dot(&a.embedding, &b.embedding)
            + dot(&a.head, &b.head)
            + vdot(&a.norm_final, &b.norm_final);
        for (ga, lb) in a.layers.iter().zip(&b.layers) {
            s += vdot(&ga.norm_attn, &lb.norm_attn) + vdot(&ga.norm_ffn, &lb.norm_ffn);
            s += dot(&ga.wq, &lb.wq)
                + dot(&ga.wk, &lb.wk)
                + dot(&ga.wv, &lb.wv)
                + dot(&ga.wo, &lb.wo);
            s += dot(&ga.wup, &lb.wup) + dot(&ga.wgate, &lb.wgate) + dot(&ga.wdown, &lb.wdown);
        }
        s
    }

    #[test]
    fn fuse_backward_matches_finite_differences() {
        let model = ToyModel::init(&small(), &Rng::new(3))
            .unwrap()
            .fold_rmsnorm();
        let mut rng = Rng::new(9);
        let p0 = OstParams::random(&model.config, &mut rng, 0.3);
        // A random linear functional of the fused parameters.
        let mut c = ModelGrads::zeros_like(&model);
        let fill =
            |t: &mut Tensor, rng: &mut Rng| t.data_mut().iter_mut().for_each(|v| *v = rng.normal());
        fill(&mut c.embedding, &mut rng);
        fill(&mut c.head, &mut rng);
        for l in &mut c.layers {
            for w in [
                &mut l.wq,
                &mut l.wk,
                &mut l.wv,
                &mut l.wo,
                &mut l.wup,
                &mut l.wgate,
                &mut l.wdown,
            ] {
                fill(w, &mut rng);
            }
            l.norm_attn = rng.normal_vec(16);
            l.norm_ffn = rng.normal_vec(16);
        }
        let fused = fuse(&model, &p0).unwrap();
        let g = fuse_backward(&model, &p0, &fused, &c);
        let value = |p: &OstParams| inner(&c, &fuse(&model, p).unwrap());
        let h = 1e-6;
        let close = |fd: f64, a: f64, what: &str| {
            assert!(
                (fd - a).abs() <= 1e-6 * (1.0 + fd.abs().max(a.abs())),
                "{what}: fd {fd} analytic {a}"
            );
        };
        for i in [0, 5, 17, 100, 255] {
            let (mut a, mut b) = (p0.clone(), p0.clone());
            a.r_res.value.data_mut()[i] += h;
            b.r_res.value.data_mut()[i] -= h;
            close(
                (value(&a) - value(&b)) / (2.0 * h),
                g.r_res.data()[i],
                "r_res",
            );
        }
        for li in 0..2 {
            for i in [0, 7, 15] {
                let probe = |sel: &dyn Fn(&mut OstParams) -> &mut f64| {
                    let (mut a, mut b) = (p0.clone(), p0.clone());
                    *sel(&mut a) += h;
                    *sel(&mut b) -= h;
                    (value(&a) - value(&b)) / (2.0 * h)
                };
                close(
                    probe(&|p| &mut p.layers[li].s_attn.log_scale[i]),
                    g.layers[li].s_attn[i],
                    "s_attn",
                );
                close(
                    probe(&|p| &mut p.layers[li].s_ffn.log_scale[i]),
                    g.layers[li].s_ffn[i],
                    "s_ffn",
                );
                close(
                    probe(&|p| &mut p.layers[li].s_qk.log_scale[i % 4]),
                    g.layers[li].s_qk[i % 4],
                    "s_qk",
                );
                close(
                    probe(&|p| &mut p.layers[li].s_ov[1].log_scale[i % 8]),
                    g.layers[li].s_ov[1][i % 8],
                    "s_ov",
                );
                close(
                    probe(&|p| &mut p.layers[li].r_ov[0].value.data_mut()[i * 4]),
                    g.layers[li].r_ov[0].data()[i * 4],
                    "r_ov",
                );
            }
        }
    }

    #[test]
    fn directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = OstParams::random(&ToyConfig::default(), &mut Rng::new(4), 0.2);
        p.save_dir(dir.path()).unwrap();
        let q = OstParams::load_dir(dir.path()).unwrap();
        assert_eq!(q.r_res.value, p.r_res.value);
        for (a, b) in q.layers.iter().zip(&p.layers) {
            for (x, y) in a.s_attn.scale().iter().zip(b.s_attn.scale()) {
                assert!((x - y).abs() <= 1e-15 * y);
            }
            assert_eq!(a.r_ov, b.r_ov);
        }
        assert!(q.qk_hadamard && q.ffn_hadamard);
    }
}
