//! Versioned binary checkpoints.
//!
//! ```text
//! magic "THGC" | version u16 = 1
//! config_len u32 | config (UTF-8 TOML: [model] and [train] tables)
//! tensor_count u32
//! per tensor: name_len u16 | name | rank u8 | dims u32 x rank | values f32 x numel
//! ```
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, FormatError, Result};
use crate::model::{ModelConfig, ThgnModel};
use crate::tensor::Tensor;
use crate::train::TrainConfig;

pub const MAGIC: [u8; 4] = *b"THGC";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ConfigEcho {
    model: ModelConfig,
    train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ThgnModel,
    pub train: TrainConfig,
}

fn bad(msg: impl Into<String>) -> FormatError {
    FormatError::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let echo = ConfigEcho {
            model: self.model.config.clone(),
            train: self.train.clone(),
        };
        let text = toml::to_string(&echo).map_err(|e| Error::Config(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&(self.model.params.len() as u32).to_le_bytes());
        for (name, t) in self.model.params.iter() {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Parses a checkpoint; when `expected` is given the stored model
    /// configuration must equal it.
    pub fn from_bytes(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(bad("bad magic").into());
        }
        let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")).into());
        }
        let len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(len)?).map_err(|_| bad("config is not UTF-8"))?;
        let echo: ConfigEcho = toml::from_str(text).map_err(|e| bad(format!("config: {e}")))?;
        if let Some(want) = expected {
            if *want != echo.model {
                return Err(CheckpointError::Mismatch(format!(
                    "checkpoint holds {:?}, expected {:?}",
                    echo.model, want
                )));
            }
        }
        // the stored tensors must match what this configuration builds
        let mut model = ThgnModel::new(echo.model.clone(), 0).map_err(|e| bad(e.to_string()))?;
        let count = r.u32()? as usize;
        if count != model.params.len() {
            return Err(CheckpointError::Mismatch(format!(
                "{count} tensors stored, configuration needs {}",
                model.params.len()
            )));
        }
        for _ in 0..count {
            let name_len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| bad("tensor name is not UTF-8"))?
                .to_string();
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let numel: usize = shape.iter().product();
            let data = (0..numel)
                .map(|_| r.u32().map(|b| f32::from_bits(b) as f64))
                .collect::<Result<Vec<_>, _>>()?;
            let slot = model
                .params
                .get_mut(&name)
                .ok_or_else(|| CheckpointError::Mismatch(format!("unexpected tensor {name}")))?;
            if slot.shape() != shape.as_slice() {
                return Err(CheckpointError::Mismatch(format!(
                    "{name}: stored shape {shape:?}, configuration needs {:?}",
                    slot.shape()
                )));
            }
            *slot = Tensor::new(shape, data).map_err(|e| bad(e.to_string()))?;
        }
        if r.pos != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - r.pos)).into());
        }
        Ok(Checkpoint {
            model,
            train: echo.train,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>, expected: Option<&ModelConfig>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, expected).map_err(|e| match e {
            CheckpointError::Format(kind) => Error::Format {
                path: path.to_path_buf(),
                kind,
            },
            CheckpointError::Mismatch(msg) => Error::CheckpointMismatch(msg),
        })
    }
}

#[derive(Debug)]
pub enum CheckpointError {
    Format(FormatError),
    Mismatch(String),
}

impl From<FormatError> for CheckpointError {
    fn from(e: FormatError) -> Self {
        CheckpointError::Format(e)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(
            FormatError::Truncated {
                expected: self.pos.saturating_add(n),
                actual: self.bytes.len(),
            },
        )?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
