//! Calibration and evaluation token sequences.

use std::path::Path;

use crate::error::{OstError, Result};
use crate::tensor_core::Rng;

pub const ZIPF_EXPONENT: f64 = 1.2;

/// Inverse-CDF sampler for `P(i) ∝ (i + 1)^{−s}` on `0..n`.
#[derive(Debug, Clone)]
pub struct Zipf {
    cdf: Vec<f64>,
}

impl Zipf {
    pub fn new(n: usize, exponent: f64) -> Result<Self> {
        if n == 0 || !(exponent.is_finite() && exponent > 0.0) {
            return Err(OstError::validation(format!(
                "Zipf needs n > 0 and a positive exponent, got n = {n}, s = {exponent}"
            )));
        }
        let mut acc = 0.0;
        let mut cdf: Vec<f64> = (0..n)
            .map(|i| {
                acc += ((i + 1) as f64).powf(-exponent);
                acc
            })
            .collect();
        for c in &mut cdf {
            *c /= acc;
        }
        Ok(Self { cdf })
    }

    pub fn sample(&self, rng: &mut Rng) -> usize {
        let u = rng.uniform();
        self.cdf
            .partition_point(|&c| c <= u)
            .min(self.cdf.len() - 1)
    }
}

/// `count` sequences of `seq_len` Zipf-distributed token ids.
pub fn synthetic_sequences(
    vocab: usize,
    seq_len: usize,
    count: usize,
    rng: &mut Rng,
) -> Result<Vec<Vec<usize>>> {
    let z = Zipf::new(vocab, ZIPF_EXPONENT)?;
    Ok((0..count)
        .map(|_| (0..seq_len).map(|_| z.sample(rng)).collect())
        .collect())
}

/// Read a newline-delimited token id file and cut it into sequences of
/// `seq_len`; a trailing partial sequence is dropped. Blank lines are
/// skipped.
pub fn read_token_file(path: &Path, vocab: usize, seq_len: usize) -> Result<Vec<Vec<usize>>> {
    let text = std::fs::read_to_string(path).map_err(|e| OstError::io(path, e))?;
    let mut ids = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parse_err = |message: String| OstError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let id: usize = line
            .parse()
            .map_err(|_| parse_err(format!("{line:?} is not a token id")))?;
        if id >= vocab {
            return Err(parse_err(format!(
                "token id {id} is outside the vocabulary of {vocab}"
            )));
        }
        ids.push(id);
    }
    if ids.len() < seq_len {
        return Err(OstError::validation(format!(
            "{} holds {} tokens, fewer than one sequence of {seq_len}",
            path.display(),
            ids.len()
        )));
    }
    Ok(ids.chunks_exact(seq_len).map(<[usize]>::to_vec).collect())
}

/// Batch `i` of a sequential pass over `data` that wraps around at the end.
pub fn wrapping_batch(data: &[Vec<usize>], batch_size: usize, i: usize) -> Vec<Vec<usize>> {
    (0..batch_size)
        .map(|j| data[(i * batch_size + j) % data.len()].clone())
        .collect()
}
