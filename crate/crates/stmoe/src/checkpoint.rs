//! Binary checkpoint files.
//!
//! Layout (little-endian): magic `STMB`, `u32` version, `u32` metadata length
//! followed by that many bytes of UTF-8 `key=value` lines, `u32` tensor count,
//! then per tensor: `u32` name length, name bytes, `u32` rank, `u64` dims,
//! raw `f64` data.

use std::path::Path;

use stmoe_core::optim::AdamW;
use stmoe_core::{Model, ModelConfig};

use crate::error::{AppError, AppResult};

pub const MAGIC: &[u8; 4] = b"STMB";
pub const VERSION: u32 = 1;

const MOMENT1: &str = "adam.m/";
const MOMENT2: &str = "adam.v/";

#[derive(Clone, Debug, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    /// Ordered `key=value` pairs; order is preserved through save and load.
    pub metadata: Vec<(String, String)>,
    pub tensors: Vec<TensorRecord>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> AppResult<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| AppError::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> AppResult<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> AppResult<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn text(&mut self, n: usize) -> AppResult<&'a str> {
        std::str::from_utf8(self.take(n)?).map_err(|_| AppError::Checkpoint("invalid UTF-8".into()))
    }
}

impl Checkpoint {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.metadata.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn require<T: std::str::FromStr>(&self, key: &str) -> AppResult<T> {
        let v = self
            .get(key)
            .ok_or_else(|| AppError::Checkpoint(format!("metadata key {key} missing")))?;
        v.parse()
            .map_err(|_| AppError::Checkpoint(format!("metadata {key}={v} is malformed")))
    }

    pub fn tensor(&self, name: &str) -> Option<&TensorRecord> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let mut meta = String::new();
        for (k, v) in &self.metadata {
            meta.push_str(k);
            meta.push('=');
            meta.push_str(v);
            meta.push('\n');
        }
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in &t.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> AppResult<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(AppError::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(AppError::Checkpoint(format!("unsupported version {version}")));
        }
        let meta_len = r.u32()? as usize;
        let meta = r.text(meta_len)?;
        let mut metadata = Vec::new();
        for line in meta.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| AppError::Checkpoint(format!("metadata line {line:?} has no '='")))?;
            metadata.push((k.to_string(), v.to_string()));
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = r.text(n)?.to_string();
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| AppError::Checkpoint(format!("tensor {name} is too large")))?;
            let bytes = r.take(numel.checked_mul(8).ok_or_else(|| AppError::Checkpoint("size overflow".into()))?)?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push(TensorRecord { name, shape, data });
        }
        if r.pos != buf.len() {
            return Err(AppError::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Self { metadata, tensors })
    }

    pub fn save(&self, path: &Path) -> AppResult<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| AppError::io(path, e))
    }

    pub fn load(path: &Path) -> AppResult<Self> {
        let buf = std::fs::read(path).map_err(|e| AppError::io(path, e))?;
        Self::from_bytes(&buf)
    }

    /// Snapshot of a model (and optionally its optimizer). `extra` metadata
    /// is written first, then the model configuration.
    pub fn capture(model: &Model, opt: Option<&AdamW>, extra: Vec<(String, String)>) -> Self {
        let mut metadata = extra;
        for (k, v) in model.config.to_pairs() {
            metadata.push((k.to_string(), v));
        }
        let mut tensors: Vec<TensorRecord> = model
            .params
            .iter()
            .map(|(name, t)| TensorRecord {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            })
            .collect();
        if let Some(opt) = opt {
            metadata.push(("opt.step".into(), opt.step.to_string()));
            for g in &opt.groups {
                metadata.push((format!("opt.lr.{}", g.name), format!("{:?}", g.lr)));
            }
            for id in model.params.ids() {
                let name = model.params.name(id);
                let shape = model.params.get(id).shape().to_vec();
                let (m, v) = opt.moments(id);
                tensors.push(TensorRecord {
                    name: format!("{MOMENT1}{name}"),
                    shape: shape.clone(),
                    data: m.to_vec(),
                });
                tensors.push(TensorRecord {
                    name: format!("{MOMENT2}{name}"),
                    shape,
                    data: v.to_vec(),
                });
            }
        }
        Self { metadata, tensors }
    }

    /// Model configuration stored in the metadata.
    pub fn model_config(&self) -> AppResult<ModelConfig> {
        let mut c = ModelConfig::desk();
        for key in ModelConfig::KEYS {
            let v = self
                .get(key)
                .ok_or_else(|| AppError::Checkpoint(format!("model key {key} missing")))?;
            c.set(key, v)
                .map_err(|e| AppError::Checkpoint(format!("model key {key}: {e}")))?;
        }
        c.validate().map_err(|e| AppError::Checkpoint(e.to_string()))?;
        Ok(c)
    }

    /// Rebuilds the model; every parameter must be present with its shape.
    pub fn model(&self) -> AppResult<Model> {
        self.model_with(self.model_config()?)
    }

    /// Loads the stored parameters into a model built from `config`, which
    /// may differ from the stored one in non-architectural settings.
    pub fn model_with(&self, config: ModelConfig) -> AppResult<Model> {
        let mut model = Model::new(config, 0)?;
        model
            .load_named(
                self.tensors
                    .iter()
                    .filter(|t| !t.name.starts_with(MOMENT1) && !t.name.starts_with(MOMENT2))
                    .map(|t| (t.name.as_str(), t.shape.as_slice(), t.data.as_slice())),
            )
            .map_err(|e| AppError::Mismatch(e.to_string()))?;
        Ok(model)
    }

    /// Restores optimizer moments and step counter saved by [`Checkpoint::capture`].
    pub fn restore_optimizer(&self, model: &Model, opt: &mut AdamW) -> AppResult<()> {
        opt.step = self.require("opt.step")?;
        for id in model.params.ids() {
            let name = model.params.name(id);
            let m = self
                .tensor(&format!("{MOMENT1}{name}"))
                .ok_or_else(|| AppError::Checkpoint(format!("optimizer state for {name} missing")))?;
            let v = self
                .tensor(&format!("{MOMENT2}{name}"))
                .ok_or_else(|| AppError::Checkpoint(format!("optimizer state for {name} missing")))?;
            opt.set_moments(id, &m.data, &v.data)
                .map_err(|e| AppError::Mismatch(e.to_string()))?;
        }
        Ok(())
    }
}
