//! Versioned checkpoint archive.
//!
//! Layout: the 8-byte magic `EGXCKPT\0`, a little-endian `u32` format version,
//! a little-endian `u64` header length, the UTF-8 JSON header (model config,
//! tensor names and shapes, dtype), then every tensor as little-endian `f32`
//! values in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::params::Params;
use crate::error::{Error, Result};
use crate::trainer::Variant;

const MAGIC: &[u8; 8] = b"EGXCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub dtype: String,
    pub model: ModelConfig,
    pub variant: Variant,
    pub epochs_trained: usize,
    /// Free-form training metadata (the training config when produced by the trainer).
    #[serde(default)]
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// Trained parameters plus the wiring they were trained under. Parameters are
/// held at storage precision so a checkpoint in memory and on disk agree.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: Params,
    pub variant: Variant,
    pub epochs_trained: usize,
    pub meta: serde_json::Value,
}

fn round_to_storage(p: &mut Params) {
    for s in p.slices_mut() {
        for v in s.iter_mut() {
            *v = f64::from(*v as f32);
        }
    }
}

impl Checkpoint {
    pub fn new(mut params: Params, variant: Variant, epochs_trained: usize, meta: serde_json::Value) -> Self {
        round_to_storage(&mut params);
        Checkpoint {
            params,
            variant,
            epochs_trained,
            meta,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = CheckpointHeader {
            version: FORMAT_VERSION,
            dtype: "f32le".into(),
            model: self.params.config.clone(),
            variant: self.variant,
            epochs_trained: self.epochs_trained,
            meta: self.meta.clone(),
            tensors: self
                .params
                .layout()
                .into_iter()
                .map(|(name, shape)| TensorEntry { name, shape })
                .collect(),
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + header.len() + 4 * self.params.num_scalars());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for s in self.params.slices() {
            for &v in s {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint archive (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(20..20 + hlen)
            .ok_or_else(|| bad("truncated header".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(body)?;
        if header.dtype != "f32le" {
            return Err(bad(format!("unsupported dtype '{}'", header.dtype)));
        }
        let mut params = Params::init(&header.model, 0)?;
        let expected: Vec<TensorEntry> = params
            .layout()
            .into_iter()
            .map(|(name, shape)| TensorEntry { name, shape })
            .collect();
        if expected != header.tensors {
            return Err(bad("tensor table does not match the model config".into()));
        }
        let mut data = &bytes[20 + hlen..];
        for s in params.slices_mut() {
            let need = 4 * s.len();
            if data.len() < need {
                return Err(bad("truncated tensor data".into()));
            }
            for (v, chunk) in s.iter_mut().zip(data[..need].chunks_exact(4)) {
                *v = f64::from(f32::from_le_bytes(chunk.try_into().expect("4 bytes")));
            }
            data = &data[need..];
        }
        if !data.is_empty() {
            return Err(bad(format!("{} trailing bytes", data.len())));
        }
        Ok(Checkpoint {
            params,
            variant: header.variant,
            epochs_trained: header.epochs_trained,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
