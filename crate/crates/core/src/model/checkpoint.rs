//! Binary parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   8 bytes  "AVDETCK1"
//! count   u32
//! repeat count times:
//!   name_len u32, name (UTF-8)
//!   ndim     u32, dims (u64 each)
//!   values   f64 × prod(dims)
//! ```
//!
//! A JSON manifest of hyperparameters is written next to the file with a
//! `.json` extension.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::{ParamSet, Tensor};

const MAGIC: &[u8; 8] = b"AVDETCK1";

pub fn manifest_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn encode(params: &ParamSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + params.num_scalars() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        let shape = p.value.shape();
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Decoded `(name, tensor)` entries in file order.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut cur = Cursor { bytes, pos: 0, path };
    if cur.take(8)? != MAGIC {
        return Err(Error::format(path, "bad magic"));
    }
    let count = cur.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| Error::format(path, "name is not UTF-8"))?
            .to_string();
        let ndim = cur.u32()? as usize;
        let dims = (0..ndim)
            .map(|_| cur.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let raw = cur.take(n * 8)?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::from_vec(&dims, values).map_err(|e| Error::format(path, e.to_string()))?;
        out.push((name, t));
    }
    if cur.pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes"));
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(self.path, "truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn save<M: Serialize>(path: &Path, params: &ParamSet, manifest: &M) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, encode(params))?;
    fs::write(manifest_path(path), serde_json::to_vec_pretty(manifest)?)?;
    Ok(())
}

pub fn load_manifest<M: DeserializeOwned>(path: &Path) -> Result<M> {
    let mp = manifest_path(path);
    if !mp.exists() {
        return Err(Error::MissingArtifact(mp));
    }
    Ok(serde_json::from_slice(&fs::read(mp)?)?)
}

/// Overwrites `params` with the checkpoint's values; names and shapes must match exactly.
pub fn load_into(path: &Path, params: &mut ParamSet) -> Result<()> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let entries = decode(&fs::read(path)?, path)?;
    if entries.len() != params.len() {
        return Err(Error::format(
            path,
            format!("expected {} tensors, found {}", params.len(), entries.len()),
        ));
    }
    for (p, (name, t)) in params.as_mut_slice().iter_mut().zip(entries) {
        if p.name != name || p.value.shape() != t.shape() {
            return Err(Error::format(path, format!("tensor `{name}` does not match `{}`", p.name)));
        }
        p.value = t;
        p.zero_grad();
    }
    Ok(())
}
