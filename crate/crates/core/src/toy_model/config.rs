use serde::{Deserialize, Serialize};

use crate::error::{OstError, Result};

/// Shape of the toy transformer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub ffn_dim: usize,
    pub vocab: usize,
    pub seq_len: usize,
    pub n_layers: usize,
    pub rope_base: f64,
    /// Scale a few embedding channels by `outlier_gain`, giving the residual
    /// stream and every normed activation a handful of outlier channels.
    pub outliers: bool,
    pub outlier_gain: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            head_dim: 16,
            ffn_dim: 128,
            vocab: 256,
            seq_len: 32,
            n_layers: 2,
            rope_base: 10_000.0,
            outliers: true,
            outlier_gain: 20.0,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        let pow2 = |name: &str, v: usize| {
            if v.is_power_of_two() {
                Ok(())
            } else {
                Err(OstError::validation(format!(
                    "{name} = {v} must be a power of two"
                )))
            }
        };
        pow2("d_model", self.d_model)?;
        pow2("head_dim", self.head_dim)?;
        pow2("ffn_dim", self.ffn_dim)?;
        if self.head_dim < 2 {
            return Err(OstError::validation("head_dim must be at least 2"));
        }
        if self.n_heads * self.head_dim != self.d_model {
            return Err(OstError::validation(format!(
                "d_model = {} but n_heads × head_dim = {}",
                self.d_model,
                self.n_heads * self.head_dim
            )));
        }
        for (name, v) in [
            ("vocab", self.vocab),
            ("seq_len", self.seq_len),
            ("n_layers", self.n_layers),
        ] {
            if v == 0 {
                return Err(OstError::validation(format!("{name} must be positive")));
            }
        }
        if !(self.rope_base.is_finite() && self.rope_base > 1.0) {
            return Err(OstError::validation(format!(
                "rope_base = {} must exceed 1",
                self.rope_base
            )));
        }
        if !(self.outlier_gain.is_finite() && self.outlier_gain > 0.0) {
            return Err(OstError::validation("outlier_gain must be positive"));
        }
        Ok(())
    }

    /// Channels that receive the outlier gain.
    pub fn outlier_channels(&self) -> Vec<usize> {
        let n = (self.d_model / 16).max(1);
        let stride = self.d_model / n;
        (0..n).map(|i| i * stride + stride / 3).collect()
    }
}
