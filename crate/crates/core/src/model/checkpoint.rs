//! Checkpoint container.
//!
//! ```text
//! magic "TFCKPT\0\0" | version u32 LE | header_len u32 LE | header JSON (header_len bytes)
//! then every tensor listed in the header, in order, as f32 LE row-major
//! ```
//!
//! The header holds the model config, `(name, shape)` of the model tensors,
//! `(name, shape)` of auxiliary tensors (optimizer moments), and free-form
//! metadata such as the step counter and RNG state.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TFCKPT\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub tensors: Vec<(String, Array2<f32>)>,
    pub extra: Vec<(String, Array2<f32>)>,
    pub meta: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    shape: (usize, usize),
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    tensors: Vec<TensorInfo>,
    extra: Vec<TensorInfo>,
    meta: serde_json::Value,
}

fn infos(ts: &[(String, Array2<f32>)]) -> Vec<TensorInfo> {
    ts.iter()
        .map(|(name, t)| TensorInfo {
            name: name.clone(),
            shape: t.dim(),
        })
        .collect()
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let header = Header {
        config: ckpt.config.clone(),
        tensors: infos(&ckpt.tensors),
        extra: infos(&ckpt.extra),
        meta: ckpt.meta.clone(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::format(path, e.to_string()))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, t) in ckpt.tensors.iter().chain(&ckpt.extra) {
        t.iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes()));
    }
    // write-then-rename so an interrupted save never leaves a torn file
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &buf).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::format(path, msg.to_string());
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(
            path,
            format!("checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})"),
        ));
    }
    let hlen = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| Error::format(path, e.to_string()))?;
    let mut pos = 16 + hlen;
    let mut read = |infos: Vec<TensorInfo>| -> Result<Vec<(String, Array2<f32>)>> {
        infos
            .into_iter()
            .map(|info| {
                let n = info.shape.0 * info.shape.1;
                let raw = bytes.get(pos..pos + 4 * n).ok_or_else(|| bad("truncated tensor data"))?;
                pos += 4 * n;
                let v = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect();
                Ok((info.name, Array2::from_shape_vec(info.shape, v).unwrap()))
            })
            .collect()
    };
    let tensors = read(header.tensors)?;
    let extra = read(header.extra)?;
    if pos != bytes.len() {
        return Err(bad("trailing bytes after tensor data"));
    }
    Ok(Checkpoint {
        config: header.config,
        tensors,
        extra,
        meta: header.meta,
    })
}

impl Model<f32> {
    pub fn to_checkpoint(&self, extra: Vec<(String, Array2<f32>)>, meta: serde_json::Value) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            tensors: self.names.iter().cloned().zip(self.params.iter().cloned()).collect(),
            extra,
            meta,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let expected = Self::param_shapes(&ckpt.config);
        if expected.len() != ckpt.tensors.len()
            || expected
                .iter()
                .zip(&ckpt.tensors)
                .any(|((n, s), (m, t))| n != m || *s != t.dim())
        {
            return Err(Error::contract("checkpoint tensors do not match its model config"));
        }
        Self::from_params(&ckpt.config, ckpt.tensors.iter().map(|(_, t)| t.clone()).collect())
    }
}
