//! Flat binary tensor encoding.
//!
//! ```text
//! "EXFT" | version u32 | rank u32 | dims u32 x rank | dtype u8 | values (little-endian)
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{DType, Real, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"EXFT";
pub const VERSION: u32 = 1;

pub fn encode<T: Real>(tensor: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(13 + 4 * tensor.rank() + tensor.len() * T::DTYPE.size());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
    for &d in tensor.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.push(T::DTYPE.tag());
    for &v in tensor.data() {
        v.write_le(&mut out);
    }
    out
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize) -> Result<&'a [u8]> {
    let end = pos
        .checked_add(n)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Format(format!("tensor truncated at byte {}", *pos)))?;
    let s = &bytes[*pos..end];
    *pos = end;
    Ok(s)
}

fn read_u32(bytes: &[u8], pos: &mut usize) -> Result<u32> {
    let s = take(bytes, pos, 4)?;
    Ok(u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
}

/// Decodes one tensor from the front of `bytes`, returning it and the
/// number of bytes consumed. The stored dtype must match `T`.
pub fn decode<T: Real>(bytes: &[u8]) -> Result<(Tensor<T>, usize)> {
    let mut pos = 0;
    if take(bytes, &mut pos, 4)? != MAGIC {
        return Err(Error::Format("bad tensor magic".into()));
    }
    let version = read_u32(bytes, &mut pos)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported tensor version {version}")));
    }
    let rank = read_u32(bytes, &mut pos)? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(bytes, &mut pos)? as usize);
    }
    let tag = take(bytes, &mut pos, 1)?[0];
    let dtype = DType::from_tag(tag).ok_or_else(|| Error::Format(format!("unknown dtype tag {tag}")))?;
    if dtype != T::DTYPE {
        return Err(Error::Format(format!("stored dtype {dtype:?}, expected {:?}", T::DTYPE)));
    }
    let count: usize = shape.iter().product();
    let raw = take(bytes, &mut pos, count * dtype.size())?;
    let data = raw.chunks_exact(dtype.size()).map(T::read_le).collect();
    Ok((Tensor::new(shape, data)?, pos))
}

pub fn save<T: Real>(tensor: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode(tensor)).map_err(|e| Error::io(path, e))
}

pub fn load<T: Real>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (t, used) = decode(&bytes)?;
    if used != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after tensor", bytes.len() - used)));
    }
    Ok(t)
}
