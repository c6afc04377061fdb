//! Named-tensor checkpoints.
//!
//! Layout (little-endian): `"MMTC"`, version byte `0x01`, `u32` tensor
//! count, then per tensor `u32` name length, UTF-8 name, `u32` rows,
//! `u32` cols and a binary32 row-major payload.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::retrieval::{push_f32_payload, Reader, FORMAT_VERSION};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MMTC";

fn u32_of(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::InvalidArgument(format!("{what} {n} exceeds u32")))
}

pub fn encode_checkpoint_bytes<T: Scalar>(tensors: &[(&str, &Matrix<T>)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.push(FORMAT_VERSION);
    out.extend_from_slice(&u32_of(tensors.len(), "tensor count")?.to_le_bytes());
    for (name, m) in tensors {
        if !m.is_finite() {
            return Err(Error::NonFinite(format!("tensor `{name}`")));
        }
        let (Ok(r), Ok(c)) = (u32::try_from(m.rows()), u32::try_from(m.cols())) else {
            return Err(Error::DimOverflow {
                rows: m.rows() as u64,
                cols: m.cols() as u64,
            });
        };
        out.extend_from_slice(&u32_of(name.len(), "name length")?.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&r.to_le_bytes());
        out.extend_from_slice(&c.to_le_bytes());
        push_f32_payload(&mut out, m);
    }
    Ok(out)
}

pub fn decode_checkpoint_bytes<T: Scalar>(bytes: &[u8]) -> Result<Vec<(String, Matrix<T>)>> {
    let mut r = Reader::new(bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    let count = r.u32()?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|e| Error::InvalidArgument(format!("tensor name is not UTF-8: {e}")))?
            .to_string();
        let rows = r.u32()?;
        let cols = r.u32()?;
        out.push((name, r.matrix(rows, cols)?));
    }
    r.finish()?;
    Ok(out)
}

pub fn save_checkpoint<T: Scalar>(params: &ParamSet<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let tensors: Vec<(&str, &Matrix<T>)> = params.iter().collect();
    let bytes = encode_checkpoint_bytes(&tensors)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Vec<(String, Matrix<T>)>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint_bytes(&bytes)
}

/// Overwrites `params` with a checkpoint's tensors (names and shapes must match).
pub fn load_checkpoint<T: Scalar>(params: &mut ParamSet<T>, path: impl AsRef<Path>) -> Result<()> {
    params.load_named(read_checkpoint(path)?)
}
