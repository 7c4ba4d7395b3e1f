//! `ACET` binary tensor files.
//!
//! Layout: magic `ACET`, `u32` version (1), `u32` rank, `rank × u32` extents,
//! then the row-major payload as little-endian `f32`. All integers are
//! little-endian.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"ACET";
pub const VERSION: u32 = 1;

pub fn encode(t: &Tensor<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * t.rank() + 4 * t.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &e in t.shape() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn format_err(origin: &str, reason: impl Into<String>) -> Error {
    Error::Format { path: origin.to_string(), reason: reason.into() }
}

pub fn decode(bytes: &[u8], origin: &str) -> Result<Tensor<f32>> {
    let mut rd = bytes;
    let mut word = |what: &str| -> Result<u32> {
        let mut buf = [0u8; 4];
        rd.read_exact(&mut buf).map_err(|_| format_err(origin, format!("truncated {what}")))?;
        Ok(u32::from_le_bytes(buf))
    };
    let magic = word("magic")?.to_le_bytes();
    if &magic != MAGIC {
        return Err(format_err(origin, "bad magic"));
    }
    let version = word("version")?;
    if version != VERSION {
        return Err(format_err(origin, format!("unsupported version {version}")));
    }
    let rank = word("rank")? as usize;
    let shape = (0..rank).map(|_| word("extent").map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
    let header = 12 + 4 * rank;
    let payload = &bytes[header..];
    let n: usize = shape.iter().product();
    if payload.len() != 4 * n {
        return Err(format_err(
            origin,
            format!("payload has {} bytes, shape {:?} needs {}", payload.len(), shape, 4 * n),
        ));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(&shape, data)
}

pub fn write(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode(t))?;
    Ok(())
}

pub fn read(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path)?;
    decode(&bytes, &path.display().to_string())
}
