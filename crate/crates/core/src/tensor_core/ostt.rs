//! The OSTT v1 tensor file format.
//!
//! ```text
//! offset  size      field
//! 0       4         magic "OSTT"
//! 4       1         version (1)
//! 5       1         dtype (1 = f64)
//! 6       1         ndim
//! 7       1         zero padding to 8 bytes
//! 8       8·ndim    dims, u64 little-endian
//! ...     8·numel   payload, f64 little-endian, row-major
//! ```

use std::fs;
use std::path::Path;

use super::tensor::Tensor;
use crate::error::{OstError, Result};

pub const MAGIC: &[u8; 4] = b"OSTT";
pub const VERSION: u8 = 1;
pub const DTYPE_F64: u8 = 1;

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 8 * t.ndim() + 8 * t.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(DTYPE_F64);
    out.push(u8::try_from(t.ndim()).expect("ndim fits in a byte"));
    out.push(0);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Tensor, String> {
    if bytes.len() < 8 {
        return Err("file shorter than the 8-byte header".into());
    }
    if &bytes[0..4] != MAGIC {
        return Err("wrong magic bytes".into());
    }
    if bytes[4] != VERSION {
        return Err(format!("unsupported version {}", bytes[4]));
    }
    if bytes[5] != DTYPE_F64 {
        return Err(format!("unsupported dtype {}", bytes[5]));
    }
    let ndim = bytes[6] as usize;
    if ndim == 0 {
        return Err("zero-dimensional tensors are not supported".into());
    }
    let dims_end = 8 + 8 * ndim;
    if bytes.len() < dims_end {
        return Err("truncated dimension table".into());
    }
    let mut shape = Vec::with_capacity(ndim);
    for chunk in bytes[8..dims_end].chunks_exact(8) {
        let d = u64::from_le_bytes(chunk.try_into().unwrap());
        shape.push(usize::try_from(d).map_err(|_| "dimension overflows usize".to_string())?);
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or("element count overflows")?;
    let expected = numel
        .checked_mul(8)
        .and_then(|p| p.checked_add(dims_end))
        .ok_or("payload size overflows")?;
    if bytes.len() != expected {
        return Err(format!(
            "payload is {} bytes, shape {shape:?} needs {}",
            bytes.len() - dims_end,
            expected - dims_end
        ));
    }
    let data = bytes[dims_end..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(shape, data).map_err(|e| e.to_string())
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(t)).map_err(|e| OstError::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| OstError::io(path, e))?;
    decode(&bytes).map_err(|reason| OstError::Format {
        path: path.to_path_buf(),
        reason,
    })
}
