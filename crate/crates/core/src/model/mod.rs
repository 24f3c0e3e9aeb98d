//! BERT-style post-norm transformer encoder with a token-level linear head.

mod checkpoint;
mod forward;

pub use checkpoint::{Checkpoint, CheckpointError, OptimizerMoments, CHECKPOINT_VERSION};
pub use forward::{
    forward, forward_trace, objective_loss, pooled_representation, register, sequence_logits, ForwardTrace,
    ModelVars,
};

use rand::Rng;
use thiserror::Error;

use crate::autodiff::{AutodiffError, Scalar, Tensor};
use crate::rng::{self, Domain};

pub const LAYER_NORM_EPS: f64 = 1e-12;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("token id {id} out of range for vocabulary of {vocab_size}")]
    IdOutOfRange { id: u32, vocab_size: usize },
    #[error("sequence length {len} exceeds max_len {max_len}")]
    TooLong { len: usize, max_len: usize },
    #[error("batch shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_hidden: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    pub head_classes: usize,
}

fn default_dropout() -> f64 {
    0.1
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.layers == 0 || self.heads == 0 || self.d_hidden == 0 || self.d_ff == 0 {
            return bad("layers, heads, d_hidden and d_ff must be positive");
        }
        if !self.d_hidden.is_multiple_of(self.heads) {
            return bad("d_hidden must be divisible by heads");
        }
        if self.vocab_size == 0 || self.max_len == 0 || self.head_classes == 0 {
            return bad("vocab_size, max_len and head_classes must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_hidden / self.heads
    }

    pub fn with_head_classes(&self, classes: usize) -> Self {
        Self { head_classes: classes, ..self.clone() }
    }
}

/// Architecture presets: the full-size shapes (kept for parameter
/// accounting) and desk-scale shapes with the same layer/width ordering.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    PaperBase,
    PaperMedium,
    PaperSmall,
    TinyBase,
    TinyMedium,
    TinySmall,
}

impl Preset {
    pub const ALL: [Preset; 6] = [
        Preset::PaperBase,
        Preset::PaperMedium,
        Preset::PaperSmall,
        Preset::TinyBase,
        Preset::TinyMedium,
        Preset::TinySmall,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::PaperBase => "paper-base",
            Preset::PaperMedium => "paper-medium",
            Preset::PaperSmall => "paper-small",
            Preset::TinyBase => "tiny-base",
            Preset::TinyMedium => "tiny-medium",
            Preset::TinySmall => "tiny-small",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == name)
    }

    /// `(layers, heads, d_hidden, d_ff)`.
    pub fn dims(self) -> (usize, usize, usize, usize) {
        match self {
            Preset::PaperBase => (12, 12, 768, 3072),
            Preset::PaperMedium => (8, 8, 512, 2048),
            Preset::PaperSmall => (4, 8, 512, 2048),
            Preset::TinyBase => (4, 4, 128, 512),
            Preset::TinyMedium => (3, 4, 96, 384),
            Preset::TinySmall => (2, 4, 96, 384),
        }
    }

    pub fn config(self, vocab_size: usize, max_len: usize, head_classes: usize) -> ModelConfig {
        let (layers, heads, d_hidden, d_ff) = self.dims();
        ModelConfig { layers, heads, d_hidden, d_ff, vocab_size, max_len, dropout: 0.1, head_classes }
    }
}

/// How a parameter tensor is initialised and regularised.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Truncated-normal init, weight decay applies.
    Weight,
    /// Zero init, no decay.
    Bias,
    /// Layer-norm scale: ones, no decay.
    NormScale,
    /// Layer-norm shift: zeros, no decay.
    NormShift,
}

impl ParamKind {
    pub fn decays(self) -> bool {
        self == ParamKind::Weight
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

impl ParamSpec {
    fn new(name: impl Into<String>, shape: &[usize], kind: ParamKind) -> Self {
        Self { name: name.into(), shape: shape.to_vec(), kind }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// The canonical parameter order. Checkpoints, optimizer moments and
/// gradient vectors all follow it.
pub fn param_specs(config: &ModelConfig) -> Vec<ParamSpec> {
    use ParamKind::*;
    let (d, f, v, l, c) = (config.d_hidden, config.d_ff, config.vocab_size, config.max_len, config.head_classes);
    let mut specs = vec![
        ParamSpec::new("embeddings.token", &[v, d], Weight),
        ParamSpec::new("embeddings.position", &[l, d], Weight),
        ParamSpec::new("embeddings.norm.gamma", &[d], NormScale),
        ParamSpec::new("embeddings.norm.beta", &[d], NormShift),
    ];
    for i in 0..config.layers {
        let p = |s: &str| format!("layers.{i}.{s}");
        specs.extend([
            ParamSpec::new(p("attention.query.weight"), &[d, d], Weight),
            ParamSpec::new(p("attention.query.bias"), &[d], Bias),
            ParamSpec::new(p("attention.key.weight"), &[d, d], Weight),
            ParamSpec::new(p("attention.key.bias"), &[d], Bias),
            ParamSpec::new(p("attention.value.weight"), &[d, d], Weight),
            ParamSpec::new(p("attention.value.bias"), &[d], Bias),
            ParamSpec::new(p("attention.output.weight"), &[d, d], Weight),
            ParamSpec::new(p("attention.output.bias"), &[d], Bias),
            ParamSpec::new(p("attention.norm.gamma"), &[d], NormScale),
            ParamSpec::new(p("attention.norm.beta"), &[d], NormShift),
            ParamSpec::new(p("ffn.in.weight"), &[d, f], Weight),
            ParamSpec::new(p("ffn.in.bias"), &[f], Bias),
            ParamSpec::new(p("ffn.out.weight"), &[f, d], Weight),
            ParamSpec::new(p("ffn.out.bias"), &[d], Bias),
            ParamSpec::new(p("ffn.norm.gamma"), &[d], NormScale),
            ParamSpec::new(p("ffn.norm.beta"), &[d], NormShift),
        ]);
    }
    specs.push(ParamSpec::new("head.weight", &[d, c], Weight));
    specs.push(ParamSpec::new("head.bias", &[c], Bias));
    specs
}

/// Number of scalar parameters, head included.
pub fn param_count(config: &ModelConfig) -> usize {
    param_specs(config).iter().map(ParamSpec::numel).sum()
}

pub(crate) const TENSORS_PER_LAYER: usize = 16;

/// All weights of a model, stored flat in canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ModelParams<T> {
    /// Truncated-normal(0, 0.02) weights, zero biases, unit norm scales.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, Domain::Init, &[]);
        let tensors = param_specs(config).iter().map(|s| init_tensor(s, &mut rng)).collect();
        Ok(Self { tensors })
    }

    pub fn from_tensors(config: &ModelConfig, tensors: Vec<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(config);
        if specs.len() != tensors.len() {
            return Err(ModelError::Shape(format!("expected {} tensors, got {}", specs.len(), tensors.len())));
        }
        for (s, t) in specs.iter().zip(&tensors) {
            if s.shape != t.shape() {
                return Err(ModelError::Shape(format!("{}: expected {:?}, got {:?}", s.name, s.shape, t.shape())));
            }
        }
        Ok(Self { tensors })
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn into_tensors(self) -> Vec<Tensor<T>> {
        self.tensors
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams { tensors: self.tensors.iter().map(Tensor::cast).collect() }
    }

    /// Same encoder weights with a freshly initialised head of `classes`
    /// outputs.
    pub fn with_fresh_head(&self, config: &ModelConfig, classes: usize, seed: u64) -> Result<(ModelConfig, Self)> {
        let new_config = config.with_head_classes(classes);
        let specs = param_specs(&new_config);
        let mut rng = rng::stream(seed, Domain::Init, &[u64::MAX]);
        let mut tensors = self.tensors.clone();
        let n = tensors.len();
        tensors[n - 2] = init_tensor(&specs[n - 2], &mut rng);
        tensors[n - 1] = init_tensor(&specs[n - 1], &mut rng);
        Ok((new_config.clone(), Self::from_tensors(&new_config, tensors)?))
    }
}

fn init_tensor<T: Scalar, R: Rng + ?Sized>(spec: &ParamSpec, rng: &mut R) -> Tensor<T> {
    match spec.kind {
        ParamKind::Weight => {
            let data = (0..spec.numel()).map(|_| T::from_f64(truncated_normal(rng) * INIT_STD)).collect();
            Tensor::new(spec.shape.clone(), data).expect("spec shape")
        }
        ParamKind::Bias | ParamKind::NormShift => Tensor::zeros(&spec.shape),
        ParamKind::NormScale => Tensor::full(&spec.shape, T::one()),
    }
}

/// Standard normal truncated to ±2 by rejection (Box–Muller).
fn truncated_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let u1: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
        let u2: f64 = rng.random();
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        if z.abs() <= 2.0 {
            return z;
        }
    }
}
