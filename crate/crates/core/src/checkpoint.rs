//! Flat binary parameter files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    4 bytes  "DNSR"
//! version  u32      1
//! count    u32      number of tensors
//! repeated count times:
//!   name_len u32, name (UTF-8, name_len bytes)
//!   ndim     u32, dims (ndim x u64)
//!   data     product(dims) x f64
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DNSR";
pub const VERSION: u32 = 1;

pub fn encode(tensors: &[(&str, &Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.at)))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32()?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let ndim = r.u32()? as usize;
        let dims = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("{name}: shape overflow")))?;
        let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let t = Tensor::new(dims, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        out.push((name, t));
    }
    if r.at != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.at)));
    }
    Ok(out)
}

pub fn save_store(path: &Path, store: &ParamStore) -> Result<()> {
    let tensors: Vec<(&str, &Tensor)> = store.ids().map(|id| (store.name(id), store.get(id))).collect();
    crate::io::write_atomic(path, &encode(&tensors))
}

pub fn read(path: &Path) -> Result<Vec<(String, Tensor)>> {
    decode(&std::fs::read(path)?)
}

/// Overwrites every parameter of `store` with the same-named checkpoint tensor.
/// Missing names, extra names and shape mismatches are validation errors.
pub fn load_into(store: &mut ParamStore, tensors: Vec<(String, Tensor)>) -> Result<()> {
    if tensors.len() != store.len() {
        return Err(Error::Validation(format!(
            "checkpoint holds {} tensors, model expects {}",
            tensors.len(),
            store.len()
        )));
    }
    for (name, t) in tensors {
        let id = store
            .find(&name)
            .ok_or_else(|| Error::Validation(format!("checkpoint tensor {name} is not a model parameter")))?;
        if store.get(id).shape() != t.shape() {
            return Err(Error::Validation(format!(
                "{name}: checkpoint shape {:?}, model shape {:?}",
                t.shape(),
                store.get(id).shape()
            )));
        }
        store.set(id, t)?;
    }
    Ok(())
}
