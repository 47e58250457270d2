//! Versioned binary checkpoint: config JSON, vocabulary, named weight
//! tensors, and optimizer moments. Save -> load -> save is byte-identical.
//!
//! Layout (all integers little-endian):
//!   magic "CT2REPCK" | version u32 | kind u8 | step u64
//!   | config JSON (u64 len + bytes) | vocab JSON (u64 len + bytes)
//!   | param count u64
//!   | per param: name (u64 len + utf8), ndim u64, dims u64*,
//!                data f64*, adam_m f64*, adam_v f64*

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::tensor::{Adam, AdamHyper, ParamStore};
use crate::text::{TextError, Vocabulary};

pub const MAGIC: &[u8; 8] = b"CT2REPCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Base,
    Longitudinal,
}

impl ModelKind {
    fn to_byte(self) -> u8 {
        match self {
            ModelKind::Base => 0,
            ModelKind::Longitudinal => 1,
        }
    }

    fn from_byte(b: u8) -> Result<Self, CheckpointError> {
        match b {
            0 => Ok(ModelKind::Base),
            1 => Ok(ModelKind::Longitudinal),
            other => Err(CheckpointError::Corrupt {
                message: format!("unknown model kind byte {other}"),
            }),
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ModelKind::Base => write!(f, "base"),
            ModelKind::Longitudinal => write!(f, "long"),
        }
    }
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error at {path}: {message}")]
    Io { path: String, message: String },
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint version {found} unsupported (this build reads version {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint corrupt: {message}")]
    Corrupt { message: String },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Vocab(#[from] TextError),
}

/// A fully materialized checkpoint.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub kind: ModelKind,
    pub step: u64,
    pub vocab: Vocabulary,
    pub params: Vec<SavedParam>,
}

#[derive(Clone, Debug)]
pub struct SavedParam {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub adam_m: Vec<f64>,
    pub adam_v: Vec<f64>,
}

impl Checkpoint {
    pub fn capture(
        config: &RunConfig,
        kind: ModelKind,
        step: u64,
        vocab: &Vocabulary,
        store: &ParamStore,
        adam: &Adam,
    ) -> Self {
        let params = store
            .iter()
            .enumerate()
            .map(|(idx, (_, p))| {
                let (m, v) = adam.moments(idx);
                SavedParam {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: p.data.clone(),
                    adam_m: m.to_vec(),
                    adam_v: v.to_vec(),
                }
            })
            .collect();
        Checkpoint {
            config: config.clone(),
            kind,
            step,
            vocab: vocab.clone(),
            params,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.kind.to_byte());
        out.extend_from_slice(&self.step.to_le_bytes());
        let config_json = self.config.to_json();
        out.extend_from_slice(&(config_json.len() as u64).to_le_bytes());
        out.extend_from_slice(config_json.as_bytes());
        let vocab_json = self.vocab.to_json();
        out.extend_from_slice(&(vocab_json.len() as u64).to_le_bytes());
        out.extend_from_slice(vocab_json.as_bytes());
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&(p.name.len() as u64).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.extend_from_slice(&(p.shape.len() as u64).to_le_bytes());
            for &d in &p.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in &p.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
            for &x in &p.adam_m {
                out.extend_from_slice(&x.to_le_bytes());
            }
            for &x in &p.adam_v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(8)?;
        if magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(CheckpointError::VersionMismatch {
                found: version,
                expected: VERSION,
            });
        }
        let kind = ModelKind::from_byte(r.take(1)?[0])?;
        let step = r.u64()?;
        let config_len = r.u64()? as usize;
        let config_json = std::str::from_utf8(r.take(config_len)?)
            .map_err(|e| CheckpointError::Corrupt {
                message: format!("config not utf-8: {e}"),
            })?
            .to_string();
        let config = RunConfig::from_json(&config_json)?;
        let vocab_len = r.u64()? as usize;
        let vocab_json = std::str::from_utf8(r.take(vocab_len)?)
            .map_err(|e| CheckpointError::Corrupt {
                message: format!("vocab not utf-8: {e}"),
            })?
            .to_string();
        let vocab = Vocabulary::from_json(&vocab_json)?;
        let n_params = r.u64()? as usize;
        let mut params = Vec::with_capacity(n_params);
        for _ in 0..n_params {
            let name_len = r.u64()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|e| CheckpointError::Corrupt {
                    message: format!("param name not utf-8: {e}"),
                })?
                .to_string();
            let ndim = r.u64()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let numel: usize = shape.iter().product();
            let data = r.f64s(numel)?;
            let adam_m = r.f64s(numel)?;
            let adam_v = r.f64s(numel)?;
            params.push(SavedParam {
                name,
                shape,
                data,
                adam_m,
                adam_v,
            });
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Corrupt {
                message: format!("{} trailing bytes", bytes.len() - r.pos),
            });
        }
        Ok(Checkpoint {
            config,
            kind,
            step,
            vocab,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, self.to_bytes()).map_err(|e| CheckpointError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path).map_err(|e| CheckpointError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_bytes(&bytes)
    }

    /// Copy saved values into a freshly initialized store. Param names,
    /// order, and shapes must match the architecture exactly.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<Adam, CheckpointError> {
        if store.len() != self.params.len() {
            return Err(CheckpointError::Corrupt {
                message: format!(
                    "checkpoint has {} params, model expects {}",
                    self.params.len(),
                    store.len()
                ),
            });
        }
        let mut m = Vec::with_capacity(self.params.len());
        let mut v = Vec::with_capacity(self.params.len());
        for ((_, live), saved) in store.iter_mut().zip(&self.params) {
            if live.name != saved.name || live.shape != saved.shape {
                return Err(CheckpointError::Corrupt {
                    message: format!(
                        "param mismatch: model has {:?}{:?}, checkpoint has {:?}{:?}",
                        live.name, live.shape, saved.name, saved.shape
                    ),
                });
            }
            live.data = saved.data.clone();
            m.push(saved.adam_m.clone());
            v.push(saved.adam_v.clone());
        }
        let hyper = AdamHyper {
            beta1: self.config.optim.beta1,
            beta2: self.config.optim.beta2,
            eps: self.config.optim.eps,
        };
        Ok(Adam::from_state(hyper, self.step, m, v))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::Corrupt {
                message: format!(
                    "truncated: wanted {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.bytes.len()
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, CheckpointError> {
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}
