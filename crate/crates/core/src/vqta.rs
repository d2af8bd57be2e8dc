//! VQTA tensor container.
//!
//! ```text
//! "VQTA" | u8 version = 1 | u8 dtype (0 = f32, 1 = f64) | u16 rank
//!        | rank × u64 extents | row-major payload
//! ```
//!
//! All integers and payload values are little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"VQTA";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            other => Err(Error::format(format!("unknown dtype code {other}"))),
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Serializes a tensor. `F32` output rounds each value to the nearest `f32`.
pub fn encode(t: &Tensor, dtype: DType) -> Result<Vec<u8>> {
    let rank = u16::try_from(t.rank())
        .map_err(|_| Error::format(format!("rank {} does not fit in u16", t.rank())))?;
    let mut out = Vec::with_capacity(8 + 8 * t.rank() + dtype.size() * t.numel());
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(dtype.code());
    out.extend_from_slice(&rank.to_le_bytes());
    for &extent in t.shape() {
        out.extend_from_slice(&(extent as u64).to_le_bytes());
    }
    match dtype {
        DType::F64 => {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        DType::F32 => {
            for &v in t.data() {
                let narrow = v as f32;
                if !narrow.is_finite() {
                    return Err(Error::numeric(format!("{v} overflows f32")));
                }
                out.extend_from_slice(&narrow.to_le_bytes());
            }
        }
    }
    Ok(out)
}

/// Parses a container, returning the tensor (widened to `f64`) and its stored dtype.
pub fn decode(bytes: &[u8]) -> Result<(Tensor, DType)> {
    let header = bytes
        .get(..8)
        .ok_or_else(|| Error::format("truncated header"))?;
    if header[..4] != MAGIC {
        return Err(Error::format("bad magic, expected VQTA"));
    }
    if header[4] != VERSION {
        return Err(Error::format(format!("unsupported version {}", header[4])));
    }
    let dtype = DType::from_code(header[5])?;
    let rank = u16::from_le_bytes([header[6], header[7]]) as usize;
    if rank == 0 {
        return Err(Error::format("rank 0 container"));
    }
    let dims_end = 8 + 8 * rank;
    let dims = bytes
        .get(8..dims_end)
        .ok_or_else(|| Error::format("truncated extents"))?;
    let mut shape = Vec::with_capacity(rank);
    let mut numel: usize = 1;
    for chunk in dims.chunks_exact(8) {
        let extent = u64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
        let extent = usize::try_from(extent)
            .ok()
            .filter(|&e| e > 0)
            .ok_or_else(|| Error::format(format!("invalid extent {extent}")))?;
        numel = numel
            .checked_mul(extent)
            .ok_or_else(|| Error::format("element count overflows"))?;
        shape.push(extent);
    }
    let payload = &bytes[dims_end..];
    let expected = numel
        .checked_mul(dtype.size())
        .ok_or_else(|| Error::format("payload size overflows"))?;
    if payload.len() != expected {
        return Err(Error::format(format!(
            "payload is {} bytes, header implies {expected}",
            payload.len()
        )));
    }
    let data: Vec<f64> = match dtype {
        DType::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect(),
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4-byte chunk"))))
            .collect(),
    };
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::format("payload holds non-finite values"));
    }
    Ok((Tensor::new(shape, data)?, dtype))
}

pub fn write(path: impl AsRef<Path>, t: &Tensor, dtype: DType) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(t, dtype)?).map_err(|e| Error::io(path, e))
}

pub fn read(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map(|(t, _)| t).map_err(|e| match e {
        Error::Format(msg) => Error::format(format!("{}: {msg}", path.display())),
        other => other,
    })
}
