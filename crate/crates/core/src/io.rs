//! Binary tensor format: `b"CCT1"`, `u32` rank, `u64` extents, then `f32`
//! values, all little-endian, row-major.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const TENSOR_MAGIC: &[u8; 4] = b"CCT1";

/// Guards against absurd allocations when reading corrupt headers.
const MAX_ELEMENTS: u64 = 1 << 32;

pub fn write_tensor<T: Real, W: Write>(out: &mut W, t: &Tensor<T>) -> Result<()> {
    out.write_all(TENSOR_MAGIC)?;
    out.write_all(&(t.ndim() as u32).to_le_bytes())?;
    for &d in t.shape() {
        out.write_all(&(d as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.len() * 4);
    for &v in t.data() {
        buf.extend_from_slice(&(v.f64() as f32).to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_tensor<R: Read>(inp: &mut R) -> Result<Tensor<f32>> {
    let mut magic = [0u8; 4];
    read_exact(inp, &mut magic, "tensor magic")?;
    if &magic != TENSOR_MAGIC {
        return Err(Error::Format(format!("bad tensor magic {:?}", magic)));
    }
    let mut b4 = [0u8; 4];
    read_exact(inp, &mut b4, "tensor rank")?;
    let ndim = u32::from_le_bytes(b4) as usize;
    if ndim == 0 || ndim > 16 {
        return Err(Error::Format(format!("tensor rank {ndim} out of range")));
    }
    let mut shape = Vec::with_capacity(ndim);
    let mut total: u64 = 1;
    for _ in 0..ndim {
        let mut b8 = [0u8; 8];
        read_exact(inp, &mut b8, "tensor extent")?;
        let d = u64::from_le_bytes(b8);
        total = total.saturating_mul(d);
        if d == 0 || total > MAX_ELEMENTS {
            return Err(Error::Format(format!("tensor extent {d} invalid")));
        }
        shape.push(d as usize);
    }
    let mut bytes = vec![0u8; total as usize * 4];
    read_exact(inp, &mut bytes, "tensor data")?;
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Tensor::new(&shape, data)
}

fn read_exact<R: Read>(inp: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    inp.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format(format!("truncated {what}")),
        _ => Error::Io(e),
    })
}

pub fn save_tensor<T: Real>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    let mut buf = Vec::new();
    write_tensor(&mut buf, t)?;
    fs::write(path, buf)?;
    Ok(())
}

/// Reads a whole file and rejects trailing bytes.
pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let bytes = fs::read(path)?;
    let mut cur = bytes.as_slice();
    let t = read_tensor(&mut cur)?;
    if !cur.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes after tensor", cur.len())));
    }
    Ok(t)
}
