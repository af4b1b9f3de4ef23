//! Tensor container files and checkpoints.
//!
//! A checkpoint is a pair of files sharing a stem: `<stem>.bin` holds named
//! f64 tensors in a small binary container, `<stem>.json` is a sidecar with
//! architecture config, step count, role tag and seed.

use crate::nets::ParamMap;
use crate::{PoseError, Result};
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

const MAGIC: &[u8; 8] = b"POSETNS1";

pub fn write_tensors(path: &Path, tensors: &BTreeMap<String, ArrayD<f64>>) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, arr) in tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(arr.ndim() as u32).to_le_bytes());
        for &d in arr.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        let std = arr.as_standard_layout();
        for &v in std.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    // atomic-ish: write then rename
    let tmp = path.with_extension("bin.tmp");
    let mut f = std::fs::File::create(&tmp)?;
    f.write_all(&buf)?;
    f.sync_all()?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_tensors(path: &Path) -> Result<BTreeMap<String, ArrayD<f64>>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(PoseError::InvalidArgument(format!(
                "truncated tensor container {path:?}"
            )));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 8)? != MAGIC {
        return Err(PoseError::InvalidArgument(format!(
            "bad magic in {path:?}"
        )));
    }
    let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let name_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|e| PoseError::InvalidArgument(format!("bad tensor name: {e}")))?;
        let ndim = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize);
        }
        let n: usize = shape.iter().product();
        let raw = take(&mut pos, n * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.insert(
            name,
            ArrayD::from_shape_vec(IxDyn(&shape), data)
                .map_err(|e| PoseError::InvalidArgument(format!("bad tensor shape: {e}")))?,
        );
    }
    Ok(out)
}

/// Sidecar metadata written next to every parameter container.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CkptMeta {
    pub arch: serde_json::Value,
    pub step: u64,
    pub role: String,
    pub seed: u64,
}

#[derive(Clone)]
pub struct Checkpoint {
    pub params: ParamMap,
    pub meta: CkptMeta,
}

impl Checkpoint {
    pub fn save(&self, stem: &Path) -> Result<()> {
        let bin = stem.with_extension("bin");
        let json = stem.with_extension("json");
        write_tensors(&bin, self.params.raw())?;
        if let Some(parent) = json.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&json, serde_json::to_string_pretty(&self.meta)?)?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<Checkpoint> {
        let bin = stem.with_extension("bin");
        let json = stem.with_extension("json");
        if !bin.exists() || !json.exists() {
            return Err(PoseError::Missing(format!("checkpoint {stem:?}")));
        }
        let tensors = read_tensors(&bin)?;
        let meta: CkptMeta = serde_json::from_str(&std::fs::read_to_string(&json)?)?;
        Ok(Checkpoint {
            params: ParamMap::from_raw(tensors),
            meta,
        })
    }

    pub fn exists(stem: &Path) -> bool {
        stem.with_extension("bin").exists() && stem.with_extension("json").exists()
    }
}

/// Hex SHA-256 over the serialized parameters; used for immutability checks.
pub fn param_checksum(params: &ParamMap) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for (name, arr) in params.raw() {
        h.update(name.as_bytes());
        for &v in arr.as_standard_layout().iter() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

pub fn stem(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}
