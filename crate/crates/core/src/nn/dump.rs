//! Flat binary dumps of tensors for debugging: an 8-byte little-endian
//! dimension count, one 8-byte little-endian size per dimension, then the
//! values as little-endian 32-bit floats.

use std::path::Path;

use crate::error::{Error, Result};

use super::scalar::Scalar;
use super::tensor::Tensor;

pub fn encode_dump<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 * (1 + t.shape().len()) + 4 * t.len());
    out.extend_from_slice(&(t.shape().len() as u64).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    out
}

pub fn decode_dump(bytes: &[u8]) -> Result<Tensor<f32>> {
    let bad = |m: &str| Error::Shape(format!("tensor dump: {m}"));
    let read_u64 = |at: usize| -> Result<u64> {
        let b = bytes.get(at..at + 8).ok_or_else(|| bad("truncated header"))?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    };
    let ndim = read_u64(0)? as usize;
    if ndim > 16 {
        return Err(bad("implausible rank"));
    }
    let shape = (0..ndim).map(|i| read_u64(8 + 8 * i).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let start = 8 * (1 + ndim);
    let n: usize = shape.iter().product();
    if bytes.len() != start + 4 * n {
        return Err(bad("payload length does not match shape"));
    }
    let data = bytes[start..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Tensor::new(shape, data)
}

pub fn write_dump<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    std::fs::write(path, encode_dump(t)).map_err(|e| Error::io(path, e))
}

pub fn read_dump(path: &Path) -> Result<Tensor<f32>> {
    decode_dump(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}
