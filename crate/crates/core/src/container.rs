//! Binary tensor container used for checkpoints and masks.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "CAMP" | version: u32 | count: u32 |
//!   count × ( rank: u32 | dims: u32 × rank | payload: f64 × ∏dims )
//! ```
//!
//! Masks are stored as ordinary tensors holding `0.0` / `1.0`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::PruneMask;

pub const MAGIC: &[u8; 4] = b"CAMP";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct TensorRecord {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl TensorRecord {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let len: usize = dims.iter().product();
        if len != data.len() {
            return Err(Error::InvalidShape {
                dims,
                reason: format!("payload has {} values", data.len()),
            });
        }
        Ok(TensorRecord { dims, data })
    }

    pub fn from_mask(mask: &PruneMask) -> Self {
        TensorRecord {
            dims: mask.dims().to_vec(),
            data: mask.bits().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        }
    }

    pub fn to_mask(&self) -> Result<PruneMask> {
        let bits = self
            .data
            .iter()
            .map(|&v| match v {
                v if v == 1.0 => Ok(true),
                v if v == 0.0 => Ok(false),
                other => Err(Error::format(format!("mask entry {other} is not 0 or 1"))),
            })
            .collect::<Result<Vec<_>>>()?;
        PruneMask::from_bits(&self.dims, bits)
    }
}

pub fn encode(tensors: &[TensorRecord]) -> Vec<u8> {
    let payload: usize = tensors.iter().map(|t| 4 + 4 * t.dims.len() + 8 * t.data.len()).sum();
    let mut out = Vec::with_capacity(12 + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
        for &d in &t.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Little-endian cursor that reports truncation as a format error.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&end| end <= self.buf.len())
            .ok_or_else(|| Error::format(format!("truncated at byte {}", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub(crate) fn expect_magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != magic {
            return Err(Error::format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(magic)
            )));
        }
        Ok(())
    }

    pub(crate) fn expect_version(&mut self, version: u32) -> Result<()> {
        let got = self.u32()?;
        if got != version {
            return Err(Error::format(format!("unsupported version {got}")));
        }
        Ok(())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(Error::format(format!("{} trailing bytes", self.remaining())));
        }
        Ok(())
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<TensorRecord>> {
    let mut r = Reader::new(bytes);
    r.expect_magic(MAGIC)?;
    r.expect_version(VERSION)?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let rank = r.u32()? as usize;
        if rank * 4 > r.remaining() {
            return Err(Error::format(format!("rank {rank} exceeds buffer")));
        }
        let dims = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let len = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&len| len.checked_mul(8).is_some_and(|b| b <= r.remaining()))
            .ok_or_else(|| Error::format(format!("dims {dims:?} exceed buffer")))?;
        let data = (0..len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        tensors.push(TensorRecord { dims, data });
    }
    r.finish()?;
    Ok(tensors)
}

pub fn write_file(path: &Path, tensors: &[TensorRecord]) -> Result<()> {
    fs::write(path, encode(tensors)).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Vec<TensorRecord>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
