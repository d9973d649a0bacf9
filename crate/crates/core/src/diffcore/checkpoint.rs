//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    b"NTCKPT\0\0"
//! version  u32
//! manifest u32 length + UTF-8 JSON {"meta": .., "tensors": [{name, shape, dtype}]}
//! per tensor, in manifest order:
//!   u32 name length, name bytes, u32 ndim, ndim x u64 dims, u8 dtype (0 = f32),
//!   numel x f32 payload
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"NTCKPT\0\0";
const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub tensor: Tensor,
}

#[derive(Serialize, Deserialize)]
struct ManifestTensor {
    name: String,
    shape: Vec<usize>,
    dtype: String,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    meta: serde_json::Value,
    tensors: Vec<ManifestTensor>,
}

pub fn write_checkpoint(path: &Path, entries: &[CheckpointEntry], meta: &serde_json::Value) -> Result<()> {
    let manifest = Manifest {
        meta: meta.clone(),
        tensors: entries
            .iter()
            .map(|e| ManifestTensor {
                name: e.name.clone(),
                shape: e.tensor.shape().to_vec(),
                dtype: "f32".into(),
            })
            .collect(),
    };
    let manifest = serde_json::to_vec(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    buf.extend_from_slice(&manifest);
    for e in entries {
        buf.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(e.name.as_bytes());
        buf.extend_from_slice(&(e.tensor.ndim() as u32).to_le_bytes());
        for &d in e.tensor.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        buf.push(DTYPE_F32);
        for &v in e.tensor.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &buf).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Reads a checkpoint, returning its free-form metadata and tensors in
/// manifest order.
pub fn read_checkpoint(path: &Path) -> Result<(serde_json::Value, Vec<CheckpointEntry>)> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let len = r.u32()? as usize;
    let manifest: Manifest =
        serde_json::from_slice(r.take(len)?).map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
    let mut entries = Vec::with_capacity(manifest.tensors.len());
    for m in &manifest.tensors {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let dtype = r.take(1)?[0];
        if name != m.name || shape != m.shape || dtype != DTYPE_F32 || m.dtype != "f32" {
            return Err(Error::Checkpoint(format!("tensor header `{name}` disagrees with manifest entry `{}`", m.name)));
        }
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel.ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` is too large")))?;
        let bytes = r.take(numel.checked_mul(4).ok_or_else(|| Error::Checkpoint("overflow".into()))?)?;
        let data: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let tensor = Tensor::new(shape, data)?;
        if !tensor.is_finite() {
            return Err(Error::Checkpoint(format!("tensor `{name}` holds non-finite values")));
        }
        entries.push(CheckpointEntry { name, tensor });
    }
    if r.pos != buf.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok((manifest.meta, entries))
}
