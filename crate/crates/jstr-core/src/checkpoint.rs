//! Bit-exact checkpoint serialization.
//!
//! Layout: magic `JSTR` (4 bytes), u32 LE format version, u64 LE length of a
//! JSON metadata block (model config, step counter, RNG state), the block
//! itself, then tensor records until end of file. Each record is a u32 LE
//! name length + UTF-8 name, u64 LE rank, u64 LE dims, then the raw f32 LE
//! payload. Model parameters come first in canonical order, then optimizer
//! moments as `opt.m.<name>` / `opt.v.<name>`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{params_from_named, tensor_names, ModelConfig, ModelParams};
use crate::tensor::Tensor;
use crate::train::AdamState;

pub const MAGIC: &[u8; 4] = b"JSTR";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic bytes (not a checkpoint)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {VERSION})")]
    VersionMismatch { found: u32 },
    #[error("corrupt tensor data: {0}")]
    CorruptTensor(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("corrupt metadata block: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model_config: ModelConfig,
    /// Optimizer steps taken; also the AdamW bias-correction time.
    pub step: u64,
    /// Seed of the training run; every generator is re-derivable from it.
    pub rng_state: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub meta: CheckpointMeta,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn from_params(params: &ModelParams, opt: Option<&AdamState>, step: u64, rng_state: u64) -> Self {
        let mut tensors: Vec<NamedTensor> = params
            .visit()
            .into_iter()
            .map(|(name, t)| NamedTensor { name, shape: t.shape.clone(), data: t.data.clone() })
            .collect();
        if let Some(opt) = opt {
            let names = tensor_names(&params.config);
            for (prefix, moments) in [("opt.m.", &opt.m), ("opt.v.", &opt.v)] {
                for (name, buf) in names.iter().zip(moments) {
                    tensors.push(NamedTensor {
                        name: format!("{prefix}{name}"),
                        shape: vec![buf.len()],
                        data: buf.clone(),
                    });
                }
            }
        }
        Checkpoint {
            version: VERSION,
            meta: CheckpointMeta { model_config: params.config.clone(), step, rng_state },
            tensors,
        }
    }

    /// Rebuild model parameters (and optimizer state when moments are
    /// present) from the stored tensors.
    pub fn into_state(&self) -> Result<(ModelParams, Option<AdamState>), CheckpointError> {
        let find = |name: &str| -> Option<Tensor> {
            self.tensors
                .iter()
                .find(|t| t.name == name)
                .map(|t| Tensor::new(t.shape.clone(), t.data.clone()))
        };
        let params = params_from_named(&self.meta.model_config, |name| find(name))
            .ok_or_else(|| CheckpointError::CorruptTensor("missing or misshapen parameter".into()))?;

        let names = tensor_names(&self.meta.model_config);
        let has_moments = self.tensors.iter().any(|t| t.name.starts_with("opt.m."));
        let opt = if has_moments {
            let mut m = Vec::with_capacity(names.len());
            let mut v = Vec::with_capacity(names.len());
            for name in &names {
                m.push(
                    find(&format!("opt.m.{name}"))
                        .ok_or_else(|| CheckpointError::CorruptTensor(format!("missing opt.m.{name}")))?
                        .data,
                );
                v.push(
                    find(&format!("opt.v.{name}"))
                        .ok_or_else(|| CheckpointError::CorruptTensor(format!("missing opt.v.{name}")))?
                        .data,
                );
            }
            Some(AdamState { m, v, t: self.meta.step })
        } else {
            None
        };
        Ok((params, opt))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let json = serde_json::to_vec(&self.meta).expect("meta serializes");
        let mut out = Vec::with_capacity(json.len() + 64);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u64).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in &t.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.take(4).map_err(|_| CheckpointError::BadMagic)?;
        if magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(CheckpointError::VersionMismatch { found: version });
        }
        let json_len = cur.take_u64()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(cur.take(json_len)?)?;

        let mut tensors = Vec::new();
        while !cur.done() {
            let name_len = u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(cur.take(name_len)?.to_vec())
                .map_err(|_| CheckpointError::CorruptTensor("non-UTF-8 tensor name".into()))?;
            let rank = cur.take_u64()? as usize;
            if rank > 8 {
                return Err(CheckpointError::CorruptTensor(format!("{name}: rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(cur.take_u64()? as usize);
            }
            let numel: usize = shape.iter().product();
            if numel > 100_000_000 {
                return Err(CheckpointError::CorruptTensor(format!("{name}: implausible size")));
            }
            let raw = cur.take(numel * 4).map_err(|_| {
                CheckpointError::CorruptTensor(format!("{name}: truncated payload"))
            })?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            tensors.push(NamedTensor { name, shape, data });
        }
        Ok(Checkpoint { version, meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        Ok(std::fs::write(path, self.to_bytes())?)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::CorruptTensor("unexpected end of file".into()));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn take_u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}
