//! `TNS1` tensor container.
//!
//! Layout: the magic `TNS1`, a `u32` rank, `rank` `u32` dimensions, then the
//! values in row-major order as `f32`. All integers and floats are
//! little-endian. Values are narrowed to `f32` on write and widened back on
//! read.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TNS1";

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.rank() + 4 * t.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let mut r = bytes;
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| Error::Format("truncated header".into()))?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let mut word = || -> Result<u32> {
        let mut b = [0u8; 4];
        r.read_exact(&mut b).map_err(|_| Error::Format("truncated file".into()))?;
        Ok(u32::from_le_bytes(b))
    };
    let rank = word()? as usize;
    let shape = (0..rank).map(|_| word().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let numel: usize = shape.iter().product();
    let body = &bytes[8 + 4 * rank..];
    if body.len() != 4 * numel {
        return Err(Error::Format(format!(
            "expected {} data bytes for shape {shape:?}, found {}",
            4 * numel,
            body.len()
        )));
    }
    let data = body.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
    Tensor::new(&shape, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode(t))?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    decode(&fs::read(path)?)
}
