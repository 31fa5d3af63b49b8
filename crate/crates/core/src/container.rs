//! Binary tensor container (`.paln`).
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "PALN" | version u8 (0x01) | dtype u8 (0x01 f32, 0x02 f64) | ndim u32 | extents u32 * ndim | data
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const MAGIC: &[u8; 4] = b"PALN";
pub const VERSION: u8 = 0x01;

pub fn encode<T: Real>(tensor: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(10 + 4 * tensor.ndim() + T::BYTES * tensor.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(T::DTYPE);
    out.extend_from_slice(&(tensor.ndim() as u32).to_le_bytes());
    for &e in tensor.shape() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &x in tensor.data() {
        x.write_le(&mut out);
    }
    out
}

/// Decodes a container; `path` only labels errors.
pub fn decode<T: Real>(bytes: &[u8], path: &Path) -> Result<Tensor<T>> {
    let truncated = |detail: &str| Error::Truncated { path: path.to_path_buf(), detail: detail.to_string() };
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::BadMagic(path.to_path_buf()));
    }
    if bytes.len() < 10 {
        return Err(truncated("header"));
    }
    if bytes[4] != VERSION {
        return Err(Error::UnsupportedVersion { path: path.to_path_buf(), version: bytes[4] });
    }
    if bytes[5] != T::DTYPE {
        return Err(Error::DtypeMismatch { path: path.to_path_buf(), expected: T::DTYPE, found: bytes[5] });
    }
    let ndim = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let header = 10 + 4 * ndim;
    if bytes.len() < header {
        return Err(truncated("extents"));
    }
    let shape: Vec<usize> =
        bytes[10..header].chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize).collect();
    let count: usize = shape.iter().product();
    let payload = &bytes[header..];
    if payload.len() != count * T::BYTES {
        return Err(truncated(&format!("expected {} payload bytes, found {}", count * T::BYTES, payload.len())));
    }
    let data = payload.chunks_exact(T::BYTES).map(T::read_le).collect();
    Tensor::new(shape, data)
}

pub fn write_tensor<T: Real>(path: &Path, tensor: &Tensor<T>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, encode(tensor)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor<T: Real>(path: &Path) -> Result<Tensor<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
