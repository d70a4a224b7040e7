//! Binary checkpoint: `CSATTN`, a version byte, the model config as key = value
//! text, the training step, then one record per parameter
//! (name, rank, dims, little-endian f64 values).

use std::path::Path;

use super::{ConfigError, Model, ModelConfig};
use crate::autodiff::Tensor;

pub const CHECKPOINT_VERSION: u8 = 1;
const MAGIC: &[u8; 6] = b"CSATTN";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint (bad magic)")]
    Magic,
    #[error("checkpoint format version {found}, expected {expected}")]
    Version { found: u8, expected: u8 },
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("unknown parameter {0:?} in checkpoint")]
    UnknownParam(String),
    #[error("parameter {0:?} missing from checkpoint")]
    MissingParam(String),
    #[error("parameter {name:?} has shape {found:?}, config implies {expected:?}")]
    ParamShape { name: String, found: Vec<usize>, expected: Vec<usize> },
    #[error(transparent)]
    Config(#[from] ConfigError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub step: u64,
    pub params: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, step: u64) -> Self {
        Self {
            config: model.config.clone(),
            step,
            params: model.store.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(CHECKPOINT_VERSION);
        let config = self.config.to_kv().to_text();
        out.extend_from_slice(&(config.len() as u32).to_le_bytes());
        out.extend_from_slice(config.as_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in &self.params {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len(), "magic")? != MAGIC {
            return Err(CheckpointError::Magic);
        }
        let version = r.take(1, "version")?[0];
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let clen = r.u32("config length")? as usize;
        let text = std::str::from_utf8(r.take(clen, "config")?).map_err(|_| CheckpointError::Format("config is not UTF-8".into()))?;
        let config = ModelConfig::from_kv_text(text)?;
        let step = r.u64("step")?;
        let n = r.u32("parameter count")? as usize;
        let mut params = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| CheckpointError::Format("parameter name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32("rank")? as usize;
            if rank == 0 || rank > 8 {
                return Err(CheckpointError::Format(format!("parameter {name:?} has rank {rank}")));
            }
            let dims = (0..rank).map(|_| r.u64("dims").map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let count = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| CheckpointError::Format("shape overflow".into()))?;
            let raw = r.take(count.checked_mul(8).ok_or(CheckpointError::Truncated("values"))?, "values")?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
            let t = Tensor::new(dims, data).map_err(|e| CheckpointError::Format(format!("parameter {name:?}: {e}")))?;
            params.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { config, step, params })
    }

    /// Rebuilds the model, checking every name and shape against the config.
    pub fn into_model(self) -> Result<Model, CheckpointError> {
        let mut model = Model::new(self.config)?;
        let mut seen = vec![false; model.store.len()];
        for (name, t) in self.params {
            let id = model.store.id(&name).ok_or_else(|| CheckpointError::UnknownParam(name.clone()))?;
            let p = model.store.get_mut(id);
            if p.value.shape() != t.shape() {
                return Err(CheckpointError::ParamShape {
                    name,
                    found: t.shape().to_vec(),
                    expected: p.value.shape().to_vec(),
                });
            }
            p.value = t;
            seen[id.0] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(CheckpointError::MissingParam(model.store.get(crate::autodiff::ParamId(i)).name.clone()));
        }
        Ok(model)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(CheckpointError::Truncated(what))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn save_checkpoint(path: &Path, model: &Model, step: u64) -> Result<(), CheckpointError> {
    std::fs::write(path, Checkpoint::from_model(model, step).to_bytes()).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Checkpoint::from_bytes(&bytes)
}
