//! Toy decoder-only transformer with fake quantization, analytic backward
//! pass and exact fusion of transform parameters.

mod config;
mod forward;
mod model;
mod ost;
mod rope;

pub use config::ToyConfig;
pub use forward::{
    backward, forward_prepared, forward_quantized, quantize_weights, quantize_weights_backward,
    ActQuant, ForwardCache, ForwardOutput, LayerGrads, LayerTaps, ModelGrads, RMS_EPS,
};
pub use model::{Layer, ManifestEntry, ToyModel};
pub use ost::{fuse, fuse_backward, LayerOst, LayerOstGrads, OstGrads, OstParams};
pub use rope::{rope_apply, rope_frequencies};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::qsur::{fit_gaussian, qsur, QsurReport, QsurVariant};
use crate::quantizer::QuantConfig;
use crate::tensor_core::Tensor;

/// The plain model that realizes `model` under `ost`. Residual rotations
/// need folded norms, so `model` is folded first unless it already is or
/// `ost` has no residual rotation.
pub fn materialize(model: &ToyModel, ost: &OstParams) -> Result<ToyModel> {
    let r = &ost.r_res.value;
    if model.is_folded() || r.max_abs_diff(&Tensor::eye(r.rows())) == 0.0 {
        fuse(model, ost)
    } else {
        fuse(&model.fold_rmsnorm(), ost)
    }
}

/// Forward pass with optional transforms and optional fake quantization.
/// Transforms are fused into a copy of the weights first, which is exact in
/// full precision.
pub fn forward(
    model: &ToyModel,
    tokens: &[usize],
    ost: Option<&OstParams>,
    quant: Option<&QuantConfig>,
) -> Result<ForwardOutput> {
    match ost {
        None => forward_quantized(model, tokens, quant),
        Some(p) => forward_quantized(&materialize(model, p)?, tokens, quant),
    }
}

/// QSUR of one quantized tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TapQsur {
    pub tensor: String,
    #[serde(flatten)]
    pub report: QsurReport,
}

/// Number of quantized tensors per layer: seven weights and six activations.
pub const TAPS_PER_LAYER: usize = 13;

/// QSUR of every quantized tensor. Weight rows are samples in the input
/// space; activation rows from all `batches` are pooled.
pub fn collect_qsur(
    model: &ToyModel,
    ost: Option<&OstParams>,
    batches: &[Vec<usize>],
    quant: Option<&QuantConfig>,
    variant: QsurVariant,
    alpha: f64,
) -> Result<Vec<TapQsur>> {
    let m = match ost {
        None => model.clone(),
        Some(p) => materialize(model, p)?,
    };
    let outs: Vec<ForwardOutput> = batches
        .par_iter()
        .map(|b| forward_quantized(&m, b, quant))
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for (li, layer) in m.layers.iter().enumerate() {
        for (name, w) in layer.linears() {
            rows.push((format!("layer{li}.{name}"), w.clone()));
        }
        for (ti, (name, _)) in outs
            .first()
            .map(|o| o.taps[li].named())
            .into_iter()
            .flatten()
            .enumerate()
        {
            let parts: Vec<&Tensor> = outs.iter().map(|o| o.taps[li].named()[ti].1).collect();
            rows.push((format!("layer{li}.{name}"), Tensor::vstack(&parts)));
        }
    }
    rows.into_par_iter()
        .map(|(tensor, x)| {
            let stats = fit_gaussian(&x, alpha)?;
            Ok(TapQsur {
                tensor,
                report: qsur(&stats, variant)?,
            })
        })
        .collect()
}

/// Mean normalized QSUR over a report list.
pub fn mean_normalized_qsur(rows: &[TapQsur]) -> f64 {
    rows.iter().map(|r| r.report.qsur_normalized).sum::<f64>() / rows.len().max(1) as f64
}
