//! Calibration loop, round-to-nearest baseline and report emission.

mod calibration;

pub use calibration::{read_token_file, synthetic_sequences, wrapping_batch, Zipf, ZIPF_EXPONENT};

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{OstError, Result};
use crate::losses::{sequence_loss, LossConfig};
use crate::qsur::{QsurVariant, DEFAULT_ALPHA};
use crate::quantizer::QuantConfig;
use crate::stiefel::{cosine_lr, AdamConfig, OptimizerKind, StiefelParam};
use crate::tensor_core::{Rng, Tensor};
use crate::toy_model::{
    backward, collect_qsur, forward_prepared, forward_quantized, fuse, fuse_backward, materialize,
    mean_normalized_qsur, quantize_weights, quantize_weights_backward, ActQuant, ModelGrads,
    OstParams, TapQsur, ToyConfig, ToyModel,
};
use crate::transforms::{random_hadamard, womi_init};

/// Environment variable capping the worker thread count.
pub const THREADS_ENV: &str = "OSTLAB_THREADS";

/// How the learnable rotations start.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    #[default]
    Womi,
    RandomHadamard,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ToyConfig,
    pub bits: QuantConfig,
    pub loss: LossConfig,
    pub optimizer: OptimizerKind,
    pub adam: AdamConfig,
    pub lr_orthogonal: f64,
    pub lr_scale: f64,
    pub iterations: usize,
    pub batch_size: usize,
    /// Calibration sequences.
    pub samples: usize,
    /// Held-out sequences used for the output error and QSUR tables.
    pub eval_samples: usize,
    pub cosine_decay: bool,
    pub qsur_variant: QsurVariant,
    pub qsur_alpha: f64,
    pub init: InitKind,
    pub qk_hadamard: bool,
    pub ffn_hadamard: bool,
    /// Newline-delimited token ids to use instead of synthetic data.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub token_file: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ToyConfig::default(),
            bits: QuantConfig {
                w_bits: 4,
                a_bits: 4,
                kv_bits: 4,
                kv_grouping: Default::default(),
            },
            loss: LossConfig::default(),
            optimizer: OptimizerKind::RiemannAdam,
            adam: AdamConfig::default(),
            lr_orthogonal: 2e-2,
            lr_scale: 3e-2,
            iterations: 150,
            batch_size: 8,
            samples: 1000,
            eval_samples: 32,
            cosine_decay: true,
            qsur_variant: QsurVariant::PrincipalAxes,
            qsur_alpha: DEFAULT_ALPHA,
            init: InitKind::Womi,
            qk_hadamard: true,
            ffn_hadamard: true,
            token_file: None,
            output_dir: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.bits.validate()?;
        self.loss.validate()?;
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(OstError::validation(format!(
                    "{name} = {v} must be positive and finite"
                )))
            }
        };
        positive("lr_orthogonal", self.lr_orthogonal)?;
        positive("lr_scale", self.lr_scale)?;
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("samples", self.samples),
            ("eval_samples", self.eval_samples),
        ] {
            if v == 0 {
                return Err(OstError::validation(format!("{name} must be at least 1")));
            }
        }
        if !(self.qsur_alpha > 0.0 && self.qsur_alpha < 1.0) {
            return Err(OstError::validation(format!(
                "qsur_alpha = {} must lie in (0, 1)",
                self.qsur_alpha
            )));
        }
        Ok(())
    }

    /// Parse TOML or JSON, chosen by extension (JSON for `.json`, TOML
    /// otherwise). Unknown keys are rejected.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| OstError::io(path, e))?;
        let cfg: RunConfig = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| OstError::Parse {
                path: path.to_path_buf(),
                line: e.line(),
                message: e.to_string(),
            })?
        } else {
            toml::from_str(&text).map_err(|e| {
                let line = e.span().map_or(0, |s| {
                    1 + text[..s.start.min(text.len())].matches('\n').count()
                });
                OstError::Parse {
                    path: path.to_path_buf(),
                    line,
                    message: e.message().to_string(),
                }
            })?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn lr(&self, base: f64, t: usize) -> f64 {
        if self.cosine_decay {
            cosine_lr(base, t, self.iterations)
        } else {
            base
        }
    }
}

/// Token sequences, one per row.
pub type Sequences = Vec<Vec<usize>>;

/// Calibration and evaluation sequences for `cfg`.
pub fn generate_calibration(cfg: &RunConfig, rng: &Rng) -> Result<(Sequences, Sequences)> {
    let m = &cfg.model;
    match &cfg.token_file {
        None => {
            let train = synthetic_sequences(m.vocab, m.seq_len, cfg.samples, &mut rng.split(10))?;
            let eval =
                synthetic_sequences(m.vocab, m.seq_len, cfg.eval_samples, &mut rng.split(11))?;
            Ok((train, eval))
        }
        Some(path) => {
            let mut all = read_token_file(path, m.vocab, m.seq_len)?;
            // Hold out up to a quarter of the file, keeping at least one
            // training sequence.
            let n_eval = cfg.eval_samples.min(all.len() / 4);
            if n_eval == 0 {
                return Ok((all.clone(), all));
            }
            let eval = all.split_off(all.len() - n_eval);
            all.truncate(cfg.samples.min(all.len()));
            Ok((all, eval))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub loss: f64,
    pub lr_orthogonal: f64,
    pub lr_scale: f64,
    pub ortho_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: RunConfig,
    pub quant: String,
    /// Mean squared logit error of the round-to-nearest model on the held-out
    /// sequences.
    pub mse_rtn: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mse_ost: Option<f64>,
    /// Largest relative logit deviation of the transformed model from the
    /// original in full precision.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub fp_invariance: Option<f64>,
    pub qsur_before: Vec<TapQsur>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub qsur_after: Vec<TapQsur>,
    pub mean_qsur_normalized_before: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mean_qsur_normalized_after: Option<f64>,
    pub loss_trace: Vec<IterationRecord>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ortho_residual: Option<f64>,
    pub loss_underflows: usize,
    pub model_fingerprint_before: String,
    pub model_fingerprint_after: String,
    /// Kept out of the serialized report so that it stays byte-identical
    /// across runs.
    #[serde(skip)]
    pub wall_clock: Duration,
}

impl RunReport {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)
            .map_err(|e| OstError::numerical(format!("report is not serializable: {e}")))?;
        s.push('\n');
        Ok(s)
    }

    pub fn loss_csv(&self) -> String {
        let mut s = String::from("iteration,loss,lr,ortho_residual\n");
        for r in &self.loss_trace {
            let _ = writeln!(
                s,
                "{},{:e},{:e},{:e}",
                r.iteration, r.loss, r.lr_orthogonal, r.ortho_residual
            );
        }
        s
    }

    /// Plain-text comparison of the two runs.
    pub fn summary_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<28} {:>14} {:>14}", "", "RTN", "transformed");
        let ost = self.mse_ost.map_or("-".into(), |v| format!("{v:.6e}"));
        let _ = writeln!(
            s,
            "{:<28} {:>14.6e} {:>14}",
            "output MSE vs FP", self.mse_rtn, ost
        );
        let after = self
            .mean_qsur_normalized_after
            .map_or("-".into(), |v| format!("{v:.6}"));
        let _ = writeln!(
            s,
            "{:<28} {:>14.6} {:>14}",
            "mean normalized QSUR", self.mean_qsur_normalized_before, after
        );
        if let (Some(first), Some(last)) = (self.loss_trace.first(), self.loss_trace.last()) {
            let _ = writeln!(
                s,
                "{:<28} {:>14.6e} {:>14.6e}",
                "loss (first, last)", first.loss, last.loss
            );
        }
        if let Some(r) = self.ortho_residual {
            let _ = writeln!(
                s,
                "{:<28} {:>14} {:>14.3e}",
                "orthogonality residual", "", r
            );
        }
        s
    }
}

/// A rayon pool honoring [`THREADS_ENV`].
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
            OstError::validation(format!("{THREADS_ENV} = {v:?} is not a positive integer"))
        })?;
        b = b.num_threads(n);
    }
    b.build()
        .map_err(|e| OstError::validation(format!("cannot start worker threads: {e}")))
}

/// Mean squared logit difference between `model` (optionally transformed
/// and quantized) and the full-precision reference logits.
fn output_mse(
    model: &ToyModel,
    eval: &[Vec<usize>],
    reference: &[Tensor],
    quant: Option<&QuantConfig>,
) -> Result<f64> {
    let per: Vec<(f64, usize)> = eval
        .par_iter()
        .zip(reference)
        .map(|(t, r)| {
            let l = forward_quantized(model, t, quant)?.logits;
            Ok((l.sub(r).data().iter().map(|v| v * v).sum(), l.len()))
        })
        .collect::<Result<_>>()?;
    let (s, n) = per.iter().fold((0.0, 0), |(s, n), (a, b)| (s + a, n + b));
    Ok(s / n as f64)
}

fn reference_logits(model: &ToyModel, seqs: &[Vec<usize>]) -> Result<Vec<Tensor>> {
    seqs.par_iter()
        .map(|t| Ok(forward_quantized(model, t, None)?.logits))
        .collect()
}

fn fingerprint_hex(m: &ToyModel) -> String {
    format!("{:016x}", m.fingerprint())
}

/// Initial transform parameters for the folded model `base`.
pub fn initial_params(base: &ToyModel, cfg: &RunConfig, rng: &Rng) -> Result<OstParams> {
    let mc = &base.config;
    let mut p = OstParams::identity(mc);
    p.qk_hadamard = cfg.qk_hadamard;
    p.ffn_hadamard = cfg.ffn_hadamard;
    match cfg.init {
        InitKind::Identity => {}
        InitKind::RandomHadamard => {
            let mut r = rng.split(20);
            p.r_res = StiefelParam::new(random_hadamard(mc.d_model, &mut r)?)?;
            for l in &mut p.layers {
                for o in &mut l.r_ov {
                    *o = StiefelParam::new(random_hadamard(mc.head_dim, &mut r)?)?;
                }
            }
        }
        InitKind::Womi => {
            let mut rows: Vec<&Tensor> = Vec::new();
            for l in &base.layers {
                rows.extend([&l.wq, &l.wk, &l.wv, &l.wup, &l.wgate]);
            }
            let r = womi_init(&Tensor::vstack(&rows))?;
            let hd = mc.head_dim;
            for (l, src) in p.layers.iter_mut().zip(&base.layers) {
                let c = r.t_matmul(&src.wo);
                for (h, o) in l.r_ov.iter_mut().enumerate() {
                    *o = StiefelParam::new(womi_init(&c.block(0, h * hd, c.rows(), hd))?)?;
                }
            }
            p.r_res = StiefelParam::new(r)?;
        }
    }
    Ok(p)
}

/// One optimizer step's loss and gradients.
fn batch_gradients(
    base: &ToyModel,
    ost: &OstParams,
    batch: &[Vec<usize>],
    targets: &[Tensor],
    cfg: &RunConfig,
) -> Result<(f64, crate::toy_model::OstGrads, usize)> {
    let fused = fuse(base, ost)?;
    let qw = quantize_weights(&fused, cfg.bits.weight_bits());
    let act = ActQuant::from_config(Some(&cfg.bits));
    let parts: Vec<(f64, ModelGrads, usize)> = batch
        .par_iter()
        .zip(targets)
        .map(|(tokens, target)| {
            let (out, cache) = forward_prepared(&qw, tokens, &act)?;
            let (loss, dlogits, diag) = sequence_loss(&cfg.loss, target, &out.logits, tokens)?;
            Ok((loss, backward(&qw, &cache, &dlogits), diag.underflows))
        })
        .collect::<Result<_>>()?;
    let n = parts.len() as f64;
    let mut it = parts.into_iter();
    let (mut loss, mut grads, mut underflows) = it.next().expect("non-empty batch");
    for (l, g, u) in it {
        loss += l;
        grads.add_assign(&g);
        underflows += u;
    }
    grads.scale(1.0 / n);
    quantize_weights_backward(&fused, &mut grads, cfg.bits.weight_bits());
    Ok((
        loss / n,
        fuse_backward(base, ost, &fused, &grads),
        underflows,
    ))
}

fn apply_step(
    ost: &mut OstParams,
    g: &crate::toy_model::OstGrads,
    cfg: &RunConfig,
    lr_o: f64,
    lr_s: f64,
) -> Result<()> {
    let k = cfg.optimizer;
    ost.r_res.step(k, &g.r_res, lr_o, &cfg.adam)?;
    for (l, gl) in ost.layers.iter_mut().zip(&g.layers) {
        l.s_attn.step_log(k, &gl.s_attn, lr_s, &cfg.adam)?;
        l.s_ffn.step_log(k, &gl.s_ffn, lr_s, &cfg.adam)?;
        l.s_qk.step_log(k, &gl.s_qk, lr_s, &cfg.adam)?;
        for (o, go) in l.r_ov.iter_mut().zip(&gl.r_ov) {
            o.step(k, go, lr_o, &cfg.adam)?;
        }
        for (s, gs) in l.s_ov.iter_mut().zip(&gl.s_ov) {
            s.step_log(k, gs, lr_s, &cfg.adam)?;
        }
    }
    Ok(())
}

/// The full calibration run: build the model from the seed, learn the
/// transforms against the full-precision outputs, and report errors and
/// QSUR before and after. The model weights are never modified.
pub fn optimize(cfg: &RunConfig) -> Result<(OstParams, RunReport)> {
    cfg.validate()?;
    let start = Instant::now();
    let rng = Rng::new(cfg.seed);
    let model = ToyModel::init(&cfg.model, &rng.split(1))?;
    let fp_before = fingerprint_hex(&model);
    let (train, eval) = generate_calibration(cfg, &rng)?;
    let base = model.fold_rmsnorm();
    let mut ost = initial_params(&base, cfg, &rng)?;

    let mut trace = Vec::with_capacity(cfg.iterations);
    let mut underflows = 0;
    for it in 0..cfg.iterations {
        let batch = wrapping_batch(&train, cfg.batch_size, it);
        let targets = reference_logits(&model, &batch)?;
        let (loss, grads, u) = batch_gradients(&base, &ost, &batch, &targets, cfg)?;
        underflows += u;
        if !loss.is_finite() {
            return Err(OstError::Training {
                iteration: it,
                reason: format!(
                    "loss is {loss}; orthogonality residual {:.3e}",
                    ost.max_ortho_residual()
                ),
            });
        }
        let (lr_o, lr_s) = (cfg.lr(cfg.lr_orthogonal, it), cfg.lr(cfg.lr_scale, it));
        apply_step(&mut ost, &grads, cfg, lr_o, lr_s).map_err(|e| OstError::Training {
            iteration: it,
            reason: e.to_string(),
        })?;
        trace.push(IterationRecord {
            iteration: it,
            loss,
            lr_orthogonal: lr_o,
            lr_scale: lr_s,
            ortho_residual: ost.max_ortho_residual(),
        });
    }

    let mut report = rtn_report(cfg, &model, &eval)?;
    let fused = fuse(&base, &ost)?;
    let reference = reference_logits(&model, &eval)?;
    report.mse_ost = Some(output_mse(&fused, &eval, &reference, Some(&cfg.bits))?);
    let fp_fused = reference_logits(&fused, &eval)?;
    let dev = reference
        .iter()
        .zip(&fp_fused)
        .map(|(a, b)| a.max_abs_diff(b) / a.max_abs().max(f64::MIN_POSITIVE))
        .fold(0.0, f64::max);
    report.fp_invariance = Some(dev);
    report.qsur_after = collect_qsur(
        &base,
        Some(&ost),
        &eval,
        Some(&cfg.bits),
        cfg.qsur_variant,
        cfg.qsur_alpha,
    )?;
    report.mean_qsur_normalized_after = Some(mean_normalized_qsur(&report.qsur_after));
    report.loss_trace = trace;
    report.ortho_residual = Some(ost.max_ortho_residual());
    report.loss_underflows = underflows;
    report.model_fingerprint_before = fp_before;
    report.model_fingerprint_after = fingerprint_hex(&model);
    report.wall_clock = start.elapsed();
    Ok((ost, report))
}

fn rtn_report(cfg: &RunConfig, model: &ToyModel, eval: &[Vec<usize>]) -> Result<RunReport> {
    let reference = reference_logits(model, eval)?;
    let mse_rtn = output_mse(model, eval, &reference, Some(&cfg.bits))?;
    let before = collect_qsur(
        model,
        None,
        eval,
        Some(&cfg.bits),
        cfg.qsur_variant,
        cfg.qsur_alpha,
    )?;
    let fp = fingerprint_hex(model);
    Ok(RunReport {
        config: cfg.clone(),
        quant: cfg.bits.label(),
        mse_rtn,
        mse_ost: None,
        fp_invariance: None,
        mean_qsur_normalized_before: mean_normalized_qsur(&before),
        qsur_before: before,
        qsur_after: Vec::new(),
        mean_qsur_normalized_after: None,
        loss_trace: Vec::new(),
        ortho_residual: None,
        loss_underflows: 0,
        model_fingerprint_before: fp.clone(),
        model_fingerprint_after: fp,
        wall_clock: Duration::ZERO,
    })
}

/// Round-to-nearest quantization of the untransformed model.
pub fn run_rtn_baseline(cfg: &RunConfig) -> Result<RunReport> {
    cfg.validate()?;
    let start = Instant::now();
    let rng = Rng::new(cfg.seed);
    let model = ToyModel::init(&cfg.model, &rng.split(1))?;
    let (_, eval) = generate_calibration(cfg, &rng)?;
    let mut r = rtn_report(cfg, &model, &eval)?;
    r.wall_clock = start.elapsed();
    Ok(r)
}

/// QSUR of `model` after fusing `ost`, on the evaluation sequences of `cfg`.
pub fn transformed_qsur(
    cfg: &RunConfig,
    model: &ToyModel,
    ost: &OstParams,
) -> Result<Vec<TapQsur>> {
    let (_, eval) = generate_calibration(cfg, &Rng::new(cfg.seed))?;
    collect_qsur(
        &materialize(model, ost)?,
        None,
        &eval,
        Some(&cfg.bits),
        cfg.qsur_variant,
        cfg.qsur_alpha,
    )
}

/// Write `report.json`, `loss.csv` and `params/` into `dir`.
pub fn write_outputs(dir: &Path, params: Option<&OstParams>, report: &RunReport) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| OstError::io(dir, e))?;
    let write = |name: &str, body: &str| {
        let p = dir.join(name);
        std::fs::write(&p, body).map_err(|e| OstError::io(&p, e))
    };
    write("report.json", &report.to_json()?)?;
    write("loss.csv", &report.loss_csv())?;
    if let Some(p) = params {
        p.save_dir(dir.join("params"))?;
    }
    Ok(())
}

/// The canned end-to-end run behind `demo`.
pub fn demo_config(seed: u64) -> RunConfig {
    RunConfig {
        seed,
        ..RunConfig::default()
    }
}
