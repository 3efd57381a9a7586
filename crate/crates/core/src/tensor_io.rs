//! Portable tensor file format.
//!
//! Layout (little-endian): magic `CTT1`, `u32` rank, one `u32` per dimension,
//! then the payload as row-major `f32`. Binary masks are stored as 0.0/1.0.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"CTT1";

/// Shape plus row-major payload, in any scalar precision.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

pub fn encode<T: Scalar>(shape: &[usize], data: &[T]) -> Result<Vec<u8>> {
    let expected: usize = shape.iter().product();
    if expected != data.len() {
        return Err(Error::ShapeMismatch(format!(
            "shape {shape:?} holds {expected} values, payload has {}",
            data.len()
        )));
    }
    let mut out = Vec::with_capacity(8 + 4 * shape.len() + 4 * data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        let d = u32::try_from(d)
            .map_err(|_| Error::ShapeMismatch(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.as_f32().to_le_bytes());
    }
    Ok(out)
}

pub fn decode<T: Scalar>(bytes: &[u8], path: &Path) -> Result<TensorFile<T>> {
    let bad = |msg: &str| Error::Format {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(bad("missing CTT1 magic"));
    }
    let word = |at: usize| -> Result<u32> {
        bytes
            .get(at..at + 4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or_else(|| bad("truncated header"))
    };
    let rank = word(4)? as usize;
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        shape.push(word(8 + 4 * i)? as usize);
    }
    let header = 8 + 4 * rank;
    let count: usize = shape.iter().product();
    if bytes.len() != header + 4 * count {
        return Err(bad(&format!(
            "payload length {} does not match shape {shape:?}",
            bytes.len() - header.min(bytes.len())
        )));
    }
    let data = bytes[header..]
        .chunks_exact(4)
        .map(|c| T::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    Ok(TensorFile { shape, data })
}

pub fn write_tensor<T: Scalar>(path: &Path, shape: &[usize], data: &[T]) -> Result<()> {
    let bytes = encode(shape, data)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_tensor<T: Scalar>(path: &Path) -> Result<TensorFile<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
