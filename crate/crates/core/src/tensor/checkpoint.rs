//! `DGDW` checkpoint files.
//!
//! Layout (little-endian): magic `DGDW`, version u32, entry count u32, then
//! per entry: name length u32, UTF-8 name, rank u32, dims u32 x rank, f64
//! payload.

use std::fs;
use std::path::Path;

use super::{Architecture, ParamSet, Tensor};
use crate::error::{DgdError, Result};
use crate::io::ByteReader;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DGDW";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint(entries: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = ByteReader::new(bytes);
    let magic = r.take(4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(DgdError::format(0, format!("bad magic {magic:?}, expected DGDW")));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(DgdError::format(4, format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name_at = r.offset();
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| DgdError::format(name_at + 4, "entry name is not UTF-8"))?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let payload_at = r.offset();
        let mut data = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            data.push(r.f64()?);
        }
        let t = Tensor::new(shape, data)
            .map_err(|e| DgdError::format(payload_at, format!("entry `{name}`: {e}")))?;
        entries.push((name, t));
    }
    if r.remaining() != 0 {
        return Err(DgdError::format(
            r.offset(),
            format!("{} trailing bytes", r.remaining()),
        ));
    }
    Ok(entries)
}

pub fn write_checkpoint(path: impl AsRef<Path>, net: &ParamSet) -> Result<()> {
    let path = path.as_ref();
    crate::io::write_atomic(path, &encode_checkpoint(net.entries()))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor)>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| DgdError::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Reads a checkpoint and binds it to `architecture`.
pub fn read_paramset(path: impl AsRef<Path>, architecture: &Architecture) -> Result<ParamSet> {
    let path = path.as_ref();
    let entries = read_checkpoint(path)?;
    ParamSet::from_entries(architecture.clone(), entries).map_err(|e| {
        DgdError::format(0, format!("{}: {e}", path.display()))
    })
}
