//! Binary checkpoint format for named parameters.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   4 bytes   "CKPT"
//! version u8        1
//! count   u32       number of entries
//! entry:
//!   name_len u32
//!   name     utf-8 bytes
//!   rank     u8
//!   dims     rank × u32
//!   frozen   u8 (0 or 1)
//!   values   product(dims) × f32
//! ```
//!
//! Values are stored as f32 bit patterns, so save → load round-trips are
//! bitwise for f32 parameters.

use std::fs;
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::optim::Parameter;
use crate::scalar::Scalar;

const MAGIC: &[u8; 4] = b"CKPT";
const VERSION: u8 = 1;

/// One deserialized checkpoint record.
#[derive(Debug, Clone)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub frozen: bool,
    pub values: Vec<f32>,
}

/// Serializes parameters in slice order.
pub fn to_bytes<T: Scalar>(params: &[Parameter<T>]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params {
        let name = p.name().as_bytes();
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        let shape = p.tensor().shape();
        out.push(shape.len() as u8);
        for &d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.push(u8::from(p.is_frozen()));
        for v in p.tensor().to_vec() {
            out.extend_from_slice(&v.to_f32_c().to_le_bytes());
        }
    }
    out
}

/// Writes a checkpoint file.
pub fn save<T: Scalar>(params: &[Parameter<T>], path: &Path) -> Result<()> {
    fs::write(path, to_bytes(params))?;
    Ok(())
}

/// Parses checkpoint bytes into entries.
pub fn from_bytes(bytes: &[u8]) -> Result<Vec<CheckpointEntry>> {
    let mut cur = Cursor { bytes, at: 0 };
    let magic = cur.take(4)?;
    if magic != MAGIC {
        return Err(TensorError::CheckpointFormat(format!(
            "bad magic {magic:?}, expected {MAGIC:?}"
        )));
    }
    let version = cur.take(1)?[0];
    if version != VERSION {
        return Err(TensorError::CheckpointFormat(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let count = cur.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = cur.u32()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|e| TensorError::CheckpointFormat(format!("entry name not utf-8: {e}")))?;
        let rank = cur.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32()? as usize);
        }
        let frozen = match cur.take(1)?[0] {
            0 => false,
            1 => true,
            other => {
                return Err(TensorError::CheckpointFormat(format!(
                    "invalid frozen flag {other} in entry `{name}`"
                )))
            }
        };
        let numel: usize = shape.iter().product();
        let mut values = Vec::with_capacity(numel);
        let raw = cur.take(numel * 4)?;
        for chunk in raw.chunks_exact(4) {
            values.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
        }
        entries.push(CheckpointEntry {
            name,
            shape,
            frozen,
            values,
        });
    }
    if cur.at != bytes.len() {
        return Err(TensorError::CheckpointFormat(format!(
            "{} trailing bytes after the last entry",
            bytes.len() - cur.at
        )));
    }
    Ok(entries)
}

/// Reads a checkpoint file into entries.
pub fn read(path: &Path) -> Result<Vec<CheckpointEntry>> {
    from_bytes(&fs::read(path)?)
}

/// Loads a checkpoint into an existing parameter set, matched strictly by
/// name: every parameter must have exactly one entry with the same shape,
/// and no entry may be left over. Frozen flags are restored onto the
/// parameters.
pub fn load_into<T: Scalar>(params: &[Parameter<T>], entries: &[CheckpointEntry]) -> Result<()> {
    use std::collections::BTreeMap;
    let mut by_name: BTreeMap<&str, &CheckpointEntry> = BTreeMap::new();
    for e in entries {
        if by_name.insert(e.name.as_str(), e).is_some() {
            return Err(TensorError::CheckpointMismatch(format!(
                "duplicate entry `{}`",
                e.name
            )));
        }
    }
    if by_name.len() != params.len() {
        return Err(TensorError::CheckpointMismatch(format!(
            "checkpoint has {} entries but the model has {} parameters",
            by_name.len(),
            params.len()
        )));
    }
    for p in params {
        let entry = by_name.get(p.name()).ok_or_else(|| {
            TensorError::CheckpointMismatch(format!("no entry for parameter `{}`", p.name()))
        })?;
        if entry.shape != p.tensor().shape() {
            return Err(TensorError::CheckpointMismatch(format!(
                "shape of `{}` is {:?} in the checkpoint but {:?} in the model",
                p.name(),
                entry.shape,
                p.tensor().shape()
            )));
        }
        let values: Vec<T> = entry.values.iter().map(|&v| T::from_f32_c(v)).collect();
        p.tensor().set_data(&values)?;
        if entry.frozen {
            p.freeze();
        } else {
            p.unfreeze();
        }
    }
    Ok(())
}

/// Reads a checkpoint file directly into a parameter set.
pub fn load<T: Scalar>(params: &[Parameter<T>], path: &Path) -> Result<()> {
    load_into(params, &read(path)?)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(TensorError::CheckpointFormat(format!(
                "truncated: wanted {n} bytes at offset {}, file has {}",
                self.at,
                self.bytes.len()
            )));
        }
        let out = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
