//! Binary tensor files.
//!
//! Layout, all integers little-endian:
//!
//! | bytes | content |
//! |---|---|
//! | 8 | magic `PUMBATNS` |
//! | 2 | format version (u16) |
//! | 1 | dtype tag (1 = f32) |
//! | 1 | rank |
//! | 4·rank | extents (u32) |
//! | 4·numel | row-major f32 values |

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"PUMBATNS";
pub const VERSION: u16 = 1;
pub const DTYPE_F32: u8 = 1;

pub fn encode(t: &Tensor<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * t.rank() + 4 * t.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(DTYPE_F32);
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                msg: format!(
                    "truncated {what}: need {n} bytes, {} remain",
                    self.bytes.len() - self.pos
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

pub fn decode(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut c = Cursor { bytes, pos: 0 };
    let magic = c.take(8, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: format!("bad magic {magic:?}"),
        });
    }
    let version = u16::from_le_bytes(c.take(2, "version")?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format {
            offset: 8,
            msg: format!("unsupported tensor version {version}, expected {VERSION}"),
        });
    }
    let dtype = c.take(1, "dtype")?[0];
    if dtype != DTYPE_F32 {
        return Err(Error::Format {
            offset: 10,
            msg: format!("unsupported dtype tag {dtype}"),
        });
    }
    let rank = c.take(1, "rank")?[0] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(u32::from_le_bytes(c.take(4, "extent")?.try_into().unwrap()) as usize);
    }
    let numel = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
    let numel = numel
        .filter(|n| n.checked_mul(4).is_some())
        .ok_or_else(|| Error::Format {
            offset: 12,
            msg: format!("extents {shape:?} overflow"),
        })?;
    let raw = c.take(4 * numel, "data")?;
    if c.pos != bytes.len() {
        return Err(Error::Format {
            offset: c.pos as u64,
            msg: format!("{} trailing bytes", bytes.len() - c.pos),
        });
    }
    let data = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Tensor::new(shape, data)
}

pub fn write(path: &Path, t: &Tensor<f32>) -> Result<()> {
    std::fs::write(path, encode(t)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Tensor<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
