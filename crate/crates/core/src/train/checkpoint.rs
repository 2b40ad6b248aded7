//! Binary checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "KLM1" | u32 version | u64 n | n bytes of JSON header
//! repeated until the trailer:
//!     u32 name_len | name (UTF-8) | u32 rank | rank * u64 dims | prod(dims) * f32
//! u32 CRC32 of every preceding byte
//! ```
//!
//! Parameter tensors use the names from [`ModelParams::named`]; optimizer
//! moments, when present, are stored as `opt.m.<name>` and `opt.v.<name>`.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{EvalRecord, LogRow, OptState, TrainConfig};
use crate::codec::Vocabulary;
use crate::model::{ModelConfig, ModelParams, Tensor};

pub const MAGIC: &[u8; 4] = b"KLM1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("not a checkpoint file: {0}")]
    Format(String),
    #[error("checkpoint checksum mismatch (stored {stored:#010x}, computed {computed:#010x}); file is truncated or corrupt")]
    CorruptChecksum { stored: u32, computed: u32 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub vocab: Vocabulary,
    pub params: ModelParams<f32>,
    pub opt_state: Option<OptState<f32>>,
    pub log_tail: Vec<LogRow>,
    pub best: Option<EvalRecord>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model_config: ModelConfig,
    train_config: TrainConfig,
    vocab: Vocabulary,
    log_tail: Vec<LogRow>,
    best: Option<EvalRecord>,
    opt_step: Option<u64>,
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) {
    out.extend((name.len() as u32).to_le_bytes());
    out.extend(name.as_bytes());
    out.extend((t.shape.len() as u32).to_le_bytes());
    for &d in &t.shape {
        out.extend((d as u64).to_le_bytes());
    }
    out.reserve(t.data.len() * 4);
    for v in &t.data {
        out.extend(v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            model_config: self.model_config.clone(),
            train_config: self.train_config.clone(),
            vocab: self.vocab.clone(),
            log_tail: self.log_tail.clone(),
            best: self.best.clone(),
            opt_step: self.opt_state.as_ref().map(|s| s.step),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len() + self.params.num_params() * 12);
        out.extend(MAGIC);
        out.extend(FORMAT_VERSION.to_le_bytes());
        out.extend((json.len() as u64).to_le_bytes());
        out.extend(&json);
        for (name, t) in self.params.named() {
            put_tensor(&mut out, &name, t);
        }
        if let Some(s) = &self.opt_state {
            for (name, t) in s.m.named() {
                put_tensor(&mut out, &format!("opt.m.{name}"), t);
            }
            for (name, t) in s.v.named() {
                put_tensor(&mut out, &format!("opt.v.{name}"), t);
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend(crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let head = &bytes[..bytes.len().min(4)];
        if head != &MAGIC[..head.len()] {
            return Err(CheckpointError::Format("bad magic bytes".into()));
        }
        if bytes.len() < 12 {
            return Err(CheckpointError::CorruptChecksum { stored: 0, computed: crc32fast::hash(bytes) });
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(CheckpointError::VersionMismatch { found: version, expected: FORMAT_VERSION });
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(trailer.try_into().unwrap());
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(CheckpointError::CorruptChecksum { stored, computed });
        }

        let mut r = Reader { buf: body, pos: 8 };
        let n = r.u64()? as usize;
        let header: Header = serde_json::from_slice(r.take(n)?)
            .map_err(|e| CheckpointError::Format(format!("header: {e}")))?;
        let mut params = HashMap::new();
        let mut m = HashMap::new();
        let mut v = HashMap::new();
        while r.pos < body.len() {
            let (name, t) = r.tensor()?;
            if let Some(rest) = name.strip_prefix("opt.m.") {
                m.insert(rest.to_string(), t);
            } else if let Some(rest) = name.strip_prefix("opt.v.") {
                v.insert(rest.to_string(), t);
            } else {
                params.insert(name, t);
            }
        }
        let cfg = &header.model_config;
        let fmt = |e: crate::model::ModelError| CheckpointError::Format(e.to_string());
        let params = ModelParams::from_named(cfg, params).map_err(fmt)?;
        let opt_state = match header.opt_step {
            Some(step) => Some(OptState {
                step,
                m: ModelParams::from_named(cfg, m).map_err(fmt)?,
                v: ModelParams::from_named(cfg, v).map_err(fmt)?,
            }),
            None if m.is_empty() && v.is_empty() => None,
            None => return Err(CheckpointError::Format("optimizer tensors without optimizer step".into())),
        };
        if cfg.vocab_size != header.vocab.len() {
            return Err(CheckpointError::Format(format!(
                "model vocab_size {} does not match embedded vocabulary of {} tokens",
                cfg.vocab_size,
                header.vocab.len()
            )));
        }
        Ok(Checkpoint {
            model_config: header.model_config,
            train_config: header.train_config,
            vocab: header.vocab,
            params,
            opt_state,
            log_tail: header.log_tail,
            best: header.best,
        })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| CheckpointError::Format(format!("record at byte {} runs past the end", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensor(&mut self) -> Result<(String, Tensor<f32>), CheckpointError> {
        let n = self.u32()? as usize;
        let name = std::str::from_utf8(self.take(n)?)
            .map_err(|_| CheckpointError::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = self.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(self.u64()? as usize);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|c| c.checked_mul(4))
            .ok_or_else(|| CheckpointError::Format(format!("tensor {name} is too large")))?;
        let raw = self.take(count)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Ok((name, Tensor { shape, data }))
    }
}

pub fn save_checkpoint(c: &Checkpoint, path: &Path) -> Result<(), CheckpointError> {
    let io = |p: &Path| {
        let path = p.display().to_string();
        move |source| CheckpointError::Io { path, source }
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io(dir))?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, c.to_bytes()).map_err(io(&tmp))?;
    std::fs::rename(&tmp, path).map_err(io(path))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
    Checkpoint::from_bytes(&bytes)
}
