//! Versioned binary checkpoints.
//!
//! Layout (little endian): magic `TLCKPT\0\0`, format version, model config
//! (layers, heads, d_hidden, d_ff, vocab_size, max_len as u64, dropout as
//! f64, head_classes as u64), objective tag (0 = none), step, root seed,
//! vocabulary fingerprint, then one length-prefixed f32 array per parameter
//! tensor in canonical order, then a flag byte and, when set, the Adam first
//! and second moments in the same order.

use std::path::Path;

use thiserror::Error;

use super::{param_specs, ModelConfig, ModelError, ModelParams};
use crate::autodiff::Tensor;
use crate::binio::{Reader, Truncated, Writer};
use crate::objectives::ObjectiveKind;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"TLCKPT\0\0";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<Truncated> for CheckpointError {
    fn from(t: Truncated) -> Self {
        CheckpointError::Format(t.to_string())
    }
}

/// Adam moment estimates, one flat array per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerMoments {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl OptimizerMoments {
    pub fn zeros(config: &ModelConfig) -> Self {
        let m: Vec<Vec<f32>> = param_specs(config).iter().map(|s| vec![0.0; s.numel()]).collect();
        Self { v: m.clone(), m }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub objective: Option<ObjectiveKind>,
    pub step: u64,
    pub seed: u64,
    pub vocab_fingerprint: u64,
    pub params: ModelParams<f32>,
    pub moments: Option<OptimizerMoments>,
}

fn write_config(w: &mut Writer, c: &ModelConfig) {
    for v in [c.layers, c.heads, c.d_hidden, c.d_ff, c.vocab_size, c.max_len] {
        w.u64(v as u64);
    }
    w.f64(c.dropout);
    w.u64(c.head_classes as u64);
}

fn read_config(r: &mut Reader) -> Result<ModelConfig, CheckpointError> {
    let mut d = [0usize; 6];
    for x in d.iter_mut() {
        *x = r.u64()? as usize;
    }
    let dropout = r.f64()?;
    let head_classes = r.u64()? as usize;
    let c = ModelConfig {
        layers: d[0],
        heads: d[1],
        d_hidden: d[2],
        d_ff: d[3],
        vocab_size: d[4],
        max_len: d[5],
        dropout,
        head_classes,
    };
    c.validate()?;
    Ok(c)
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(MAGIC);
        w.u32(CHECKPOINT_VERSION);
        write_config(&mut w, &self.config);
        w.u8(self.objective.map_or(0, ObjectiveKind::tag));
        w.u64(self.step);
        w.u64(self.seed);
        w.u64(self.vocab_fingerprint);
        for t in self.params.tensors() {
            w.f32s(t.data());
        }
        match &self.moments {
            None => w.u8(0),
            Some(mo) => {
                w.u8(1);
                for a in mo.m.iter().chain(&mo.v) {
                    w.f32s(a);
                }
            }
        }
        w.buf
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self, CheckpointError> {
        let fmt = |m: String| CheckpointError::Format(m);
        let mut r = Reader::new(data);
        if r.take(MAGIC.len())? != MAGIC {
            return Err(fmt("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        let config = read_config(&mut r)?;
        let objective = match r.u8()? {
            0 => None,
            t => Some(ObjectiveKind::from_tag(t).ok_or_else(|| fmt(format!("unknown objective tag {t}")))?),
        };
        let step = r.u64()?;
        let seed = r.u64()?;
        let vocab_fingerprint = r.u64()?;
        let specs = param_specs(&config);
        let mut tensors = Vec::with_capacity(specs.len());
        for s in &specs {
            let data = r.f32s()?;
            if data.len() != s.numel() {
                return Err(fmt(format!("{}: expected {} values, found {}", s.name, s.numel(), data.len())));
            }
            tensors.push(Tensor::new(s.shape.clone(), data).map_err(ModelError::from)?);
        }
        let params = ModelParams::from_tensors(&config, tensors)?;
        let moments = match r.u8()? {
            0 => None,
            1 => {
                let mut read_set = || -> Result<Vec<Vec<f32>>, CheckpointError> {
                    specs
                        .iter()
                        .map(|s| {
                            let a = r.f32s()?;
                            if a.len() != s.numel() {
                                return Err(fmt(format!("moment for {} has {} values", s.name, a.len())));
                            }
                            Ok(a)
                        })
                        .collect()
                };
                let m = read_set()?;
                let v = read_set()?;
                Some(OptimizerMoments { m, v })
            }
            f => return Err(fmt(format!("bad moment flag {f}"))),
        };
        if !r.is_at_end() {
            return Err(fmt("trailing bytes".into()));
        }
        Ok(Self { config, objective, step, seed, vocab_fingerprint, params, moments })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
