//! Binary parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "GWF1" | precision: u8 (4 or 8) | count: u32
//! per tensor: name_len: u32 | name (utf-8) | rank: u32 | extents: u64 × rank | data
//! ```

use super::{ParamStore, Real, Tensor, TensorError};
use std::io::{Read, Write};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GWF1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CheckpointHeader {
    /// Bytes per element.
    pub precision: u8,
    pub count: u32,
}

fn err(msg: impl Into<String>) -> TensorError {
    TensorError::Checkpoint(msg.into())
}

pub fn write_checkpoint<T: Real, W: Write>(store: &ParamStore<T>, mut w: W) -> Result<(), TensorError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.push(T::BYTES as u8);
    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, p) in store.iter() {
        let name = p.name.as_bytes();
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name);
        buf.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
        for &d in p.value.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in p.value.data() {
            x.write_le(&mut buf);
        }
    }
    w.write_all(&buf).map_err(|e| err(e.to_string()))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TensorError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| err(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, TensorError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, TensorError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Reads only the header, to dispatch on precision.
pub fn read_header(bytes: &[u8]) -> Result<CheckpointHeader, TensorError> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != CHECKPOINT_MAGIC {
        return Err(err("bad magic"));
    }
    let precision = c.take(1)?[0];
    let count = c.u32()?;
    Ok(CheckpointHeader { precision, count })
}

/// Reads a checkpoint written with element type `T`.
pub fn read_checkpoint<T: Real, R: Read>(mut r: R) -> Result<ParamStore<T>, TensorError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| err(e.to_string()))?;
    let header = read_header(&bytes)?;
    if header.precision as usize != T::BYTES {
        return Err(err(format!(
            "checkpoint precision {} bytes, expected {} ({})",
            header.precision,
            T::BYTES,
            T::NAME
        )));
    }
    let mut c = Cursor { bytes: &bytes, pos: 9 };
    let mut store = ParamStore::new();
    for _ in 0..header.count {
        let n = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(n)?)
            .map_err(|_| err("name is not utf-8"))?
            .to_string();
        let rank = c.u32()? as usize;
        let shape: Vec<usize> = (0..rank).map(|_| c.u64().map(|d| d as usize)).collect::<Result<_, _>>()?;
        let len: usize = shape.iter().product();
        let raw = c.take(len * T::BYTES)?;
        let data = raw.chunks(T::BYTES).map(T::read_le).collect();
        store.insert(name, Tensor::new(&shape, data)?);
    }
    if c.pos != bytes.len() {
        return Err(err("trailing bytes"));
    }
    Ok(store)
}
