//! Binary tensor format.
//!
//! Layout: magic `OODT`, version `u32 = 1`, dtype `u8 = 1` (f32), rank `u32`,
//! dims `u32[rank]`, then the row-major payload. All integers and floats are
//! little-endian.

use std::path::Path;

use super::write_atomic;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: &[u8; 4] = b"OODT";
pub const TENSOR_VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 1;

/// Header length for a tensor of the given rank.
pub fn header_len(rank: usize) -> usize {
    4 + 4 + 1 + 4 + 4 * rank
}

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(header_len(t.shape().len()) + 4 * t.numel());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    out.push(DTYPE_F32);
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Little-endian cursor that reports absolute byte offsets.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    base: u64,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8], base: u64) -> Self {
        Self { bytes, pos: 0, base }
    }

    pub(crate) fn offset(&self) -> u64 {
        self.base + self.pos as u64
    }

    pub(crate) fn pos(&self) -> usize {
        self.pos
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn fail<T>(&self, msg: impl Into<String>) -> Result<T> {
        Err(Error::Format {
            offset: self.offset(),
            msg: msg.into(),
        })
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return self.fail(format!("truncated {what}: need {n} bytes, {} left", self.remaining()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub(crate) fn read_tensor(r: &mut Reader<'_>) -> Result<Tensor> {
    let start = r.offset();
    if r.take(4, "magic")? != TENSOR_MAGIC {
        return Err(Error::Format {
            offset: start,
            msg: "bad tensor magic".into(),
        });
    }
    let at = r.offset();
    let version = r.u32("version")?;
    if version != TENSOR_VERSION {
        return Err(Error::Format {
            offset: at,
            msg: format!("unsupported tensor version {version}"),
        });
    }
    let at = r.offset();
    let dtype = r.u8("dtype")?;
    if dtype != DTYPE_F32 {
        return Err(Error::Format {
            offset: at,
            msg: format!("unsupported dtype {dtype}"),
        });
    }
    let rank = r.u32("rank")? as usize;
    if rank.saturating_mul(4) > r.remaining() {
        return r.fail(format!("truncated dims: rank {rank} with {} bytes left", r.remaining()));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.u32("dim")? as usize);
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|n| n.checked_mul(4).is_some());
    let Some(numel) = numel else {
        return r.fail(format!("shape {shape:?} overflows"));
    };
    let payload = r.take(numel * 4, "payload")?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(shape, data)
}

/// Decodes exactly one tensor occupying all of `bytes`.
pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let mut r = Reader::new(bytes, 0);
    let t = read_tensor(&mut r)?;
    if r.remaining() != 0 {
        return r.fail(format!("{} trailing bytes", r.remaining()));
    }
    Ok(t)
}

pub fn write_tensor_file(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_tensor(t))
}

pub fn read_tensor_file(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes)
}
