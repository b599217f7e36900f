//! Forward pass with optional fake quantization, and its hand-written
//! backward pass.
//!
//! Quantizers use the straight-through estimator. Every quantization group
//! here is sized from its own min/max (widened to include zero), so no
//! element is ever clipped and the estimator is the identity everywhere.

use super::model::ToyModel;
use super::rope::{rope_frequencies, rope_rows_in_place};
use crate::error::Result;
use crate::quantizer::{
    fake_quantize_rows_backward, fake_quantize_rows_in_place, KvGrouping, QuantConfig, QuantMode,
};
use crate::tensor_core::{hadamard_rows_in_place, Tensor};

pub const RMS_EPS: f64 = 1e-6;

/// Pre-quantization inputs of every quantized activation in one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTaps {
    pub attn_in: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    pub attn_out: Tensor,
    pub ffn_in: Tensor,
    pub ffn_mid: Tensor,
}

impl LayerTaps {
    pub fn named(&self) -> [(&'static str, &Tensor); 6] {
        [
            ("attn_in", &self.attn_in),
            ("k", &self.k),
            ("v", &self.v),
            ("attn_out", &self.attn_out),
            ("ffn_in", &self.ffn_in),
            ("ffn_mid", &self.ffn_mid),
        ]
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Tensor,
    pub taps: Vec<LayerTaps>,
    /// Attention probabilities, `[layer][head]`, each `T × T`.
    pub attention: Vec<Vec<Tensor>>,
}

/// Activation-side quantization settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ActQuant {
    pub a_bits: Option<u8>,
    pub kv_bits: Option<u8>,
    pub kv_grouping: KvGrouping,
}

impl ActQuant {
    pub fn from_config(q: Option<&QuantConfig>) -> Self {
        match q {
            None => Self::default(),
            Some(q) => Self {
                a_bits: q.act_bits(),
                kv_bits: q.kv_cache_bits(),
                kv_grouping: q.kv_grouping,
            },
        }
    }
}

/// Copy of `model` with every linear weight fake-quantized per output
/// channel (symmetric). Embedding and head stay in full precision.
pub fn quantize_weights(model: &ToyModel, w_bits: Option<u8>) -> ToyModel {
    let mut m = model.clone();
    if let Some(bits) = w_bits {
        for l in &mut m.layers {
            for w in l.linears_mut() {
                let width = w.cols();
                fake_quantize_rows_in_place(w.data_mut(), width, bits, QuantMode::Symmetric);
            }
        }
    }
    m
}

fn quant_act(x: &mut Tensor, bits: Option<u8>, width: usize) {
    if let Some(b) = bits {
        fake_quantize_rows_in_place(x.data_mut(), width, b, QuantMode::Asymmetric);
    }
}

fn quant_act_backward(pre: &Tensor, g: &mut Tensor, bits: Option<u8>, width: usize) {
    if let Some(b) = bits {
        fake_quantize_rows_backward(pre.data(), g.data_mut(), width, b, QuantMode::Asymmetric);
    }
}

/// Carry gradients with respect to the quantized weights of
/// `quantize_weights(model, w_bits)` back to the weights of `model`.
pub fn quantize_weights_backward(model: &ToyModel, grads: &mut ModelGrads, w_bits: Option<u8>) {
    let Some(bits) = w_bits else { return };
    for (l, gl) in model.layers.iter().zip(&mut grads.layers) {
        let gs = [
            &mut gl.wq,
            &mut gl.wk,
            &mut gl.wv,
            &mut gl.wo,
            &mut gl.wup,
            &mut gl.wgate,
            &mut gl.wdown,
        ];
        for ((_, w), g) in l.linears().into_iter().zip(gs) {
            fake_quantize_rows_backward(
                w.data(),
                g.data_mut(),
                w.cols(),
                bits,
                QuantMode::Symmetric,
            );
        }
    }
}

/// Row-wise `x / √(mean(x²) + ε)`; also returns the reciprocal roots.
fn rmsnorm(x: &Tensor) -> (Tensor, Vec<f64>) {
    let d = x.cols();
    let mut out = x.clone();
    let mut inv = Vec::with_capacity(x.rows());
    for row in out.data_mut().chunks_mut(d) {
        let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let r = 1.0 / (ms + RMS_EPS).sqrt();
        row.iter_mut().for_each(|v| *v *= r);
        inv.push(r);
    }
    (out, inv)
}

fn rmsnorm_backward(n: &Tensor, inv: &[f64], dn: &Tensor) -> Tensor {
    let d = n.cols();
    let mut dx = dn.clone();
    for ((row, nrow), &r) in dx.data_mut().chunks_mut(d).zip(n.data().chunks(d)).zip(inv) {
        let c = row.iter().zip(nrow).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        for (g, &y) in row.iter_mut().zip(nrow) {
            *g = r * (*g - y * c);
        }
    }
    dx
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn head_slice(x: &Tensor, h: usize, hd: usize) -> Tensor {
    x.block(0, h * hd, x.rows(), hd)
}

fn add_head_slice(dst: &mut Tensor, h: usize, hd: usize, src: &Tensor) {
    for t in 0..src.rows() {
        for (d, s) in dst.row_mut(t)[h * hd..(h + 1) * hd]
            .iter_mut()
            .zip(src.row(t))
        {
            *d += s;
        }
    }
}

/// Causal softmax of `q kᵀ/√hd`.
fn causal_attention(q: &Tensor, k: &Tensor) -> Tensor {
    let t = q.rows();
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let mut p = q.matmul_t(k).scale(scale);
    for i in 0..t {
        let row = p.row_mut(i);
        let m = row[..=i].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row[..=i].iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in row[..=i].iter_mut() {
            *v /= z;
        }
        row[i + 1..].iter_mut().for_each(|v| *v = 0.0);
    }
    p
}

#[derive(Debug, Clone)]
struct LayerCache {
    pre: LayerTaps,
    n1: Tensor,
    inv1: Vec<f64>,
    a_q: Tensor,
    q: Tensor,
    k_q: Tensor,
    v_q: Tensor,
    probs: Vec<Tensor>,
    o_q: Tensor,
    n2: Tensor,
    inv2: Vec<f64>,
    b_q: Tensor,
    u: Tensor,
    g: Tensor,
    m_q: Tensor,
}

/// Everything the backward pass needs from one forward.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    tokens: Vec<usize>,
    act: ActQuant,
    layers: Vec<LayerCache>,
    nf: Tensor,
    invf: Vec<f64>,
    nfg: Tensor,
}

/// Forward over `model` whose weights are used as given (quantize them
/// beforehand with [`quantize_weights`]).
pub fn forward_prepared(
    model: &ToyModel,
    tokens: &[usize],
    act: &ActQuant,
) -> Result<(ForwardOutput, ForwardCache)> {
    model.check_tokens(tokens)?;
    let cfg = &model.config;
    let (d, hd, nh) = (cfg.d_model, cfg.head_dim, cfg.n_heads);
    let f = cfg.ffn_dim;
    let t = tokens.len();
    let positions: Vec<usize> = (0..t).collect();
    let freqs = rope_frequencies(hd, cfg.rope_base);

    let mut h = Tensor::zeros(&[t, d]);
    for (i, &tok) in tokens.iter().enumerate() {
        h.row_mut(i).copy_from_slice(model.embedding.row(tok));
    }

    let mut taps = Vec::with_capacity(model.layers.len());
    let mut caches = Vec::with_capacity(model.layers.len());
    let mut attention = Vec::with_capacity(model.layers.len());
    for l in &model.layers {
        let (n1, inv1) = rmsnorm(&h);
        let a = n1.scale_columns(&l.norm_attn);
        let mut a_q = a.clone();
        quant_act(&mut a_q, act.a_bits, d);

        let mut q = a_q.matmul_t(&l.wq);
        let mut k = a_q.matmul_t(&l.wk);
        let v = a_q.matmul_t(&l.wv);
        rope_rows_in_place(q.data_mut(), d, hd, &positions, &freqs, false);
        rope_rows_in_place(k.data_mut(), d, hd, &positions, &freqs, false);
        if model.qk_hadamard {
            hadamard_rows_in_place(q.data_mut(), hd);
            hadamard_rows_in_place(k.data_mut(), hd);
        }
        let kv_width = match act.kv_grouping {
            KvGrouping::Token => d,
            KvGrouping::HeadToken => hd,
        };
        let mut k_q = k.clone();
        let mut v_q = v.clone();
        quant_act(&mut k_q, act.kv_bits, kv_width);
        quant_act(&mut v_q, act.kv_bits, kv_width);

        let mut o = Tensor::zeros(&[t, d]);
        let mut probs = Vec::with_capacity(nh);
        for hh in 0..nh {
            let p = causal_attention(&head_slice(&q, hh, hd), &head_slice(&k_q, hh, hd));
            add_head_slice(&mut o, hh, hd, &p.matmul(&head_slice(&v_q, hh, hd)));
            probs.push(p);
        }
        let mut o_q = o.clone();
        quant_act(&mut o_q, act.a_bits, d);
        let h1 = h.add(&o_q.matmul_t(&l.wo));

        let (n2, inv2) = rmsnorm(&h1);
        let b = n2.scale_columns(&l.norm_ffn);
        let mut b_q = b.clone();
        quant_act(&mut b_q, act.a_bits, d);
        let u = b_q.matmul_t(&l.wup);
        let g = b_q.matmul_t(&l.wgate);
        let mut m = g.zip_map(&u, |g, u| g * sigmoid(g) * u);
        if model.ffn_hadamard {
            hadamard_rows_in_place(m.data_mut(), f);
        }
        let mut m_q = m.clone();
        quant_act(&mut m_q, act.a_bits, f);
        h = h1.add(&m_q.matmul_t(&l.wdown));

        let pre = LayerTaps {
            attn_in: a,
            k,
            v,
            attn_out: o,
            ffn_in: b,
            ffn_mid: m,
        };
        taps.push(pre.clone());
        attention.push(probs.clone());
        caches.push(LayerCache {
            pre,
            n1,
            inv1,
            a_q,
            q,
            k_q,
            v_q,
            probs,
            o_q,
            n2,
            inv2,
            b_q,
            u,
            g,
            m_q,
        });
    }
    let (nf, invf) = rmsnorm(&h);
    let nfg = nf.scale_columns(&model.norm_final);
    let logits = nfg.matmul_t(&model.head);
    Ok((
        ForwardOutput {
            logits,
            taps,
            attention,
        },
        ForwardCache {
            tokens: tokens.to_vec(),
            act: *act,
            layers: caches,
            nf,
            invf,
            nfg,
        },
    ))
}

/// Forward pass of `model` with optional fake quantization.
pub fn forward_quantized(
    model: &ToyModel,
    tokens: &[usize],
    quant: Option<&QuantConfig>,
) -> Result<ForwardOutput> {
    if let Some(q) = quant {
        q.validate()?;
    }
    let w_bits = quant.and_then(|q| q.weight_bits());
    let act = ActQuant::from_config(quant);
    match w_bits {
        None => Ok(forward_prepared(model, tokens, &act)?.0),
        Some(_) => Ok(forward_prepared(&quantize_weights(model, w_bits), tokens, &act)?.0),
    }
}

/// Gradients with respect to every parameter of the model that ran.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub norm_attn: Vec<f64>,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub norm_ffn: Vec<f64>,
    pub wup: Tensor,
    pub wgate: Tensor,
    pub wdown: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub embedding: Tensor,
    pub layers: Vec<LayerGrads>,
    pub norm_final: Vec<f64>,
    pub head: Tensor,
}

fn add_vec(a: &mut [f64], b: &[f64]) {
    a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
}

fn column_dot(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let d = a.cols();
    let mut out = vec![0.0; d];
    for (ra, rb) in a.data().chunks(d).zip(b.data().chunks(d)) {
        for j in 0..d {
            out[j] += ra[j] * rb[j];
        }
    }
    out
}

impl ModelGrads {
    pub fn zeros_like(model: &ToyModel) -> Self {
        let z = |t: &Tensor| Tensor::zeros(t.shape());
        let d = model.config.d_model;
        Self {
            embedding: z(&model.embedding),
            layers: model
                .layers
                .iter()
                .map(|l| LayerGrads {
                    norm_attn: vec![0.0; d],
                    wq: z(&l.wq),
                    wk: z(&l.wk),
                    wv: z(&l.wv),
                    wo: z(&l.wo),
                    norm_ffn: vec![0.0; d],
                    wup: z(&l.wup),
                    wgate: z(&l.wgate),
                    wdown: z(&l.wdown),
                })
                .collect(),
            norm_final: vec![0.0; d],
            head: z(&model.head),
        }
    }

    pub fn add_assign(&mut self, o: &ModelGrads) {
        self.embedding.add_assign(&o.embedding);
        for (a, b) in self.layers.iter_mut().zip(&o.layers) {
            add_vec(&mut a.norm_attn, &b.norm_attn);
            add_vec(&mut a.norm_ffn, &b.norm_ffn);
            a.wq.add_assign(&b.wq);
            a.wk.add_assign(&b.wk);
            a.wv.add_assign(&b.wv);
            a.wo.add_assign(&b.wo);
            a.wup.add_assign(&b.wup);
            a.wgate.add_assign(&b.wgate);
            a.wdown.add_assign(&b.wdown);
        }
        add_vec(&mut self.norm_final, &o.norm_final);
        self.head.add_assign(&o.head);
    }

    pub fn scale(&mut self, c: f64) {
        let s = |t: &mut Tensor| t.data_mut().iter_mut().for_each(|v| *v *= c);
        let sv = |v: &mut Vec<f64>| v.iter_mut().for_each(|x| *x *= c);
        s(&mut self.embedding);
        for l in &mut self.layers {
            sv(&mut l.norm_attn);
            sv(&mut l.norm_ffn);
            for w in [
                &mut l.wq,
                &mut l.wk,
                &mut l.wv,
                &mut l.wo,
                &mut l.wup,
                &mut l.wgate,
                &mut l.wdown,
            ] {
                s(w);
            }
        }
        sv(&mut self.norm_final);
        s(&mut self.head);
    }
}

/// Backpropagate `dlogits` through the forward recorded in `cache`.
/// `model` must be the model that produced the cache, so with quantized
/// weights the result is with respect to those; see
/// [`quantize_weights_backward`].
pub fn backward(model: &ToyModel, cache: &ForwardCache, dlogits: &Tensor) -> ModelGrads {
    let cfg = &model.config;
    let (d, hd) = (cfg.d_model, cfg.head_dim);
    let f = cfg.ffn_dim;
    let t = cache.tokens.len();
    let positions: Vec<usize> = (0..t).collect();
    let freqs = rope_frequencies(hd, cfg.rope_base);
    let scale = 1.0 / (hd as f64).sqrt();
    let act = cache.act;
    let kv_width = match act.kv_grouping {
        KvGrouping::Token => d,
        KvGrouping::HeadToken => hd,
    };

    let mut grads = ModelGrads::zeros_like(model);
    grads.head = dlogits.t_matmul(&cache.nfg);
    let dnfg = dlogits.matmul(&model.head);
    grads.norm_final = column_dot(&dnfg, &cache.nf);
    let mut dh = rmsnorm_backward(
        &cache.nf,
        &cache.invf,
        &dnfg.scale_columns(&model.norm_final),
    );

    for (li, (l, c)) in model.layers.iter().zip(&cache.layers).enumerate().rev() {
        let gl = &mut grads.layers[li];
        // Feed-forward.
        gl.wdown = dh.t_matmul(&c.m_q);
        let mut dm = dh.matmul(&l.wdown);
        quant_act_backward(&c.pre.ffn_mid, &mut dm, act.a_bits, f);
        if model.ffn_hadamard {
            hadamard_rows_in_place(dm.data_mut(), f);
        }
        let mut du = Tensor::zeros(&[t, f]);
        let mut dg = Tensor::zeros(&[t, f]);
        for i in 0..t * f {
            let (g, u, m) = (c.g.data()[i], c.u.data()[i], dm.data()[i]);
            let s = sigmoid(g);
            du.data_mut()[i] = m * g * s;
            dg.data_mut()[i] = m * u * s * (1.0 + g * (1.0 - s));
        }
        gl.wup = du.t_matmul(&c.b_q);
        gl.wgate = dg.t_matmul(&c.b_q);
        let mut db = du.matmul(&l.wup).add(&dg.matmul(&l.wgate));
        quant_act_backward(&c.pre.ffn_in, &mut db, act.a_bits, d);
        gl.norm_ffn = column_dot(&db, &c.n2);
        let dh1 = dh.add(&rmsnorm_backward(
            &c.n2,
            &c.inv2,
            &db.scale_columns(&l.norm_ffn),
        ));

        // Attention.
        gl.wo = dh1.t_matmul(&c.o_q);
        let mut do_ = dh1.matmul(&l.wo);
        quant_act_backward(&c.pre.attn_out, &mut do_, act.a_bits, d);
        let mut dq = Tensor::zeros(&[t, d]);
        let mut dk = Tensor::zeros(&[t, d]);
        let mut dv = Tensor::zeros(&[t, d]);
        for (hh, p) in c.probs.iter().enumerate() {
            let do_h = head_slice(&do_, hh, hd);
            let v_h = head_slice(&c.v_q, hh, hd);
            let dp = do_h.matmul_t(&v_h);
            add_head_slice(&mut dv, hh, hd, &p.t_matmul(&do_h));
            let mut ds = dp;
            for i in 0..t {
                let prow = p.row(i);
                let drow = ds.row_mut(i);
                let dotp: f64 = prow.iter().zip(drow.iter()).map(|(a, b)| a * b).sum();
                for (dsv, &pv) in drow.iter_mut().zip(prow) {
                    *dsv = pv * (*dsv - dotp) * scale;
                }
            }
            add_head_slice(&mut dq, hh, hd, &ds.matmul(&head_slice(&c.k_q, hh, hd)));
            add_head_slice(&mut dk, hh, hd, &ds.t_matmul(&head_slice(&c.q, hh, hd)));
        }
        quant_act_backward(&c.pre.k, &mut dk, act.kv_bits, kv_width);
        quant_act_backward(&c.pre.v, &mut dv, act.kv_bits, kv_width);
        if model.qk_hadamard {
            hadamard_rows_in_place(dq.data_mut(), hd);
            hadamard_rows_in_place(dk.data_mut(), hd);
        }
        rope_rows_in_place(dq.data_mut(), d, hd, &positions, &freqs, true);
        rope_rows_in_place(dk.data_mut(), d, hd, &positions, &freqs, true);
        gl.wq = dq.t_matmul(&c.a_q);
        gl.wk = dk.t_matmul(&c.a_q);
        gl.wv = dv.t_matmul(&c.a_q);
        let mut da = dq
            .matmul(&l.wq)
            .add(&dk.matmul(&l.wk))
            .add(&dv.matmul(&l.wv));
        quant_act_backward(&c.pre.attn_in, &mut da, act.a_bits, d);
        gl.norm_attn = column_dot(&da, &c.n1);
        dh = dh1.add(&rmsnorm_backward(
            &c.n1,
            &c.inv1,
            &da.scale_columns(&l.norm_attn),
        ));
    }
    for (i, &tok) in cache.tokens.iter().enumerate() {
        for (g, v) in grads.embedding.row_mut(tok).iter_mut().zip(dh.row(i)) {
            *g += v;
        }
    }
    grads
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_core::Rng;
    use crate::toy_model::ToyConfig;

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

    /// `L = Σ C ⊙ logits` for a fixed random `C`.
    fn objective(model: &ToyModel, tokens: &[usize], c: &Tensor) -> f64 {
        let (out, _) = forward_prepared(model, tokens, &ActQuant::default()).unwrap();
        out.logits
            .data()
            .iter()
            .zip(c.data())
            .map(|(a, b)| a * b)
            .sum()
    }

    fn check_tensor(
        name: &str,
        analytic: &Tensor,
        mut probe: impl FnMut(usize, f64) -> f64,
        n: usize,
    ) {
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for i in (0..analytic.len()).step_by((analytic.len() / n).max(1)) {
            let fd = (probe(i, h) - probe(i, -h)) / (2.0 * h);
            let a = analytic.data()[i];
            worst = worst.max((fd - a).abs() / (1e-6 + fd.abs().max(a.abs())));
        }
        assert!(worst < 1e-5, "{name}: relative error {worst:e}");
    }

    #[test]
    fn backward_matches_finite_differences() {
        for (qk, ffn) in [(false, false), (true, true)] {
            let cfg = small();
            let mut model = ToyModel::init(&cfg, &Rng::new(3)).unwrap();
            model.qk_hadamard = qk;
            model.ffn_hadamard = ffn;
            let tokens = [3, 7, 7, 0, 23, 11];
            let mut rng = Rng::new(4);
            let c = Tensor::matrix(6, cfg.vocab, rng.normal_vec(6 * cfg.vocab));
            let (_, cache) = forward_prepared(&model, &tokens, &ActQuant::default()).unwrap();
            let g = backward(&model, &cache, &c);

            let m0 = model.clone();
            let probe = |access: fn(&mut ToyModel, usize) -> &mut [f64], li: usize| {
                let (m0, tokens, c) = (&m0, &tokens, &c);
                move |i: usize, h: f64| {
                    let mut m = m0.clone();
                    access(&mut m, li)[i] += h;
                    objective(&m, tokens, c)
                }
            };
            check_tensor("head", &g.head, probe(|m, _| m.head.data_mut(), 0), 40);
            check_tensor(
                "embedding",
                &g.embedding,
                probe(|m, _| m.embedding.data_mut(), 0),
                60,
            );
            check_tensor(
                "norm_final",
                &Tensor::vector(g.norm_final.clone()),
                probe(|m, _| &mut m.norm_final[..], 0),
                16,
            );
            for li in 0..2 {
                let gl = &g.layers[li];
                check_tensor(
                    "wq",
                    &gl.wq,
                    probe(|m, li| m.layers[li].wq.data_mut(), li),
                    40,
                );
                check_tensor(
                    "wk",
                    &gl.wk,
                    probe(|m, li| m.layers[li].wk.data_mut(), li),
                    40,
                );
                check_tensor(
                    "wv",
                    &gl.wv,
                    probe(|m, li| m.layers[li].wv.data_mut(), li),
                    40,
                );
                check_tensor(
                    "wo",
                    &gl.wo,
                    probe(|m, li| m.layers[li].wo.data_mut(), li),
                    40,
                );
                check_tensor(
                    "wup",
                    &gl.wup,
                    probe(|m, li| m.layers[li].wup.data_mut(), li),
                    40,
                );
                check_tensor(
                    "wgate",
                    &gl.wgate,
                    probe(|m, li| m.layers[li].wgate.data_mut(), li),
                    40,
                );
                check_tensor(
                    "wdown",
                    &gl.wdown,
                    probe(|m, li| m.layers[li].wdown.data_mut(), li),
                    40,
                );
                check_tensor(
                    "norm_attn",
                    &Tensor::vector(gl.norm_attn.clone()),
                    probe(|m, li| &mut m.layers[li].norm_attn[..], li),
                    16,
                );
                check_tensor(
                    "norm_ffn",
                    &Tensor::vector(gl.norm_ffn.clone()),
                    probe(|m, li| &mut m.layers[li].norm_ffn[..], li),
                    16,
                );
            }
        }
    }

    /// At 8 bits the quantizer barely perturbs the forward, so the
    /// straight-through gradient stays close to the full-precision one.
    #[test]
    fn quantized_backward_tracks_full_precision_at_eight_bits() {
        let cfg = small();
        let mut model = ToyModel::init(&cfg, &Rng::new(5)).unwrap();
        model.qk_hadamard = true;
        model.ffn_hadamard = true;
        let tokens = [1, 4, 9, 16, 2, 23];
        let mut rng = Rng::new(6);
        let c = Tensor::matrix(6, cfg.vocab, rng.normal_vec(6 * cfg.vocab));
        let grads = |bits: Option<u8>| {
            let act = ActQuant {
                a_bits: bits,
                kv_bits: bits,
                kv_grouping: KvGrouping::HeadToken,
            };
            let qw = quantize_weights(&model, bits);
            let (_, cache) = forward_prepared(&qw, &tokens, &act).unwrap();
            let mut g = backward(&qw, &cache, &c);
            quantize_weights_backward(&model, &mut g, bits);
            g
        };
        let (fp, q8) = (grads(None), grads(Some(8)));
        for (a, b) in fp.layers.iter().zip(&q8.layers) {
            for (x, y) in [(&a.wq, &b.wq), (&a.wv, &b.wv), (&a.wdown, &b.wdown)] {
                assert!(x.sub(y).frobenius_norm() < 0.05 * x.frobenius_norm());
            }
        }
        assert!(
            fp.embedding.sub(&q8.embedding).frobenius_norm() < 0.05 * fp.embedding.frobenius_norm()
        );
    }

    #[test]
    fn full_precision_settings_pass_through() {
        let model = ToyModel::init(&ToyConfig::default(), &Rng::new(42)).unwrap();
        let tokens: Vec<usize> = (0..32).map(|i| (i * 37) % 256).collect();
        let fp = forward_quantized(&model, &tokens, None).unwrap();
        let q16 = forward_quantized(&model, &tokens, Some(&QuantConfig::full_precision())).unwrap();
        assert!(fp.logits.max_abs_diff(&q16.logits) <= 1e-12);
        let q = forward_quantized(&model, &tokens, Some(&QuantConfig::new(4, 16, 16).unwrap()))
            .unwrap();
        let mse = q
            .logits
            .sub(&fp.logits)
            .data()
            .iter()
            .map(|v| v * v)
            .sum::<f64>();
        assert!(mse > 0.0);
    }

    #[test]
    fn taps_and_bad_tokens() {
        let model = ToyModel::init(&small(), &Rng::new(1)).unwrap();
        let out = forward_quantized(&model, &[1, 2, 3], None).unwrap();
        assert_eq!(out.taps.len(), 2);
        assert_eq!(out.taps[0].ffn_mid.shape(), &[3, 32]);
        assert!(forward_quantized(&model, &[1, 99], None).is_err());
        assert!(forward_quantized(&model, &[], None).is_err());
    }

    #[test]
    fn qk_hadamard_leaves_attention_unchanged() {
        let mut model = ToyModel::init(&ToyConfig::default(), &Rng::new(8)).unwrap();
        let tokens: Vec<usize> = (0..32).map(|i| (i * 11 + 5) % 256).collect();
        let a = forward_quantized(&model, &tokens, None).unwrap();
        model.qk_hadamard = true;
        let b = forward_quantized(&model, &tokens, None).unwrap();
        for (pa, pb) in a
            .attention
            .iter()
            .flatten()
            .zip(b.attention.iter().flatten())
        {
            assert!(pa.max_abs_diff(pb) <= 1e-10);
        }
    }
}
