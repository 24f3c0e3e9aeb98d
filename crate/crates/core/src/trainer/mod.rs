//! Pretraining loop: AdamW with linear warmup and decay, deterministic batch
//! scheduling, checkpoints and CSV metrics.

pub mod plot;

use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tape;
use crate::corpus::{epoch_order, PackedCorpus};
use crate::model::{
    objective_loss, param_specs, register, Checkpoint, CheckpointError, ModelConfig, ModelError, ModelParams,
    OptimizerMoments, Preset,
};
use crate::objectives::{make_batch, CorruptionConfig, LabeledBatch, ObjectiveError, ObjectiveKind, VocabClasses};
use crate::rng::{self, Domain};

pub const METRICS_HEADER: &str = "step,epoch,loss,lr,seconds,tokens_per_s";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite loss {loss} at step {step} (batch {batch_hash:016x})")]
    NonFiniteLoss { step: u64, batch_hash: u64, loss: f64 },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("checkpoint does not match the run: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<crate::autodiff::AutodiffError> for TrainError {
    fn from(e: crate::autodiff::AutodiffError) -> Self {
        TrainError::Model(e.into())
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Which row of the peak learning-rate table applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrTable {
    Base,
    MediumSmall,
}

impl LrTable {
    pub fn for_preset(p: Preset) -> Self {
        match p {
            Preset::PaperBase | Preset::TinyBase => LrTable::Base,
            _ => LrTable::MediumSmall,
        }
    }
}

/// Peak learning rate per objective for BERT-scale models.
pub fn default_peak_lr(kind: ObjectiveKind, table: LrTable) -> f64 {
    use ObjectiveKind::*;
    match (table, kind) {
        (_, Mlm) | (_, TokenType) => 1e-4,
        (LrTable::Base, Shuffle) => 1e-5,
        (LrTable::Base, _) => 5e-5,
        (LrTable::MediumSmall, FirstChar) => 1e-4,
        (LrTable::MediumSmall, _) => 5e-5,
    }
}

fn default_weight_decay() -> f64 {
    0.01
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_multiplier() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Peak learning rate; when absent the objective's table value times
    /// `lr_multiplier` is used.
    #[serde(default)]
    pub peak_lr: Option<f64>,
    #[serde(default = "default_multiplier")]
    pub lr_multiplier: f64,
    pub warmup_steps: u64,
    pub max_steps: u64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "default_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "default_eps")]
    pub adam_eps: f64,
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    /// 0 writes only the final checkpoint.
    #[serde(default)]
    pub checkpoint_every_steps: u64,
    #[serde(default)]
    pub grad_clip: Option<f64>,
    #[serde(default)]
    pub corruption: CorruptionConfig,
}

impl TrainConfig {
    pub fn new(max_steps: u64, warmup_steps: u64, batch_size: usize, seed: u64) -> Self {
        Self {
            peak_lr: None,
            lr_multiplier: 1.0,
            warmup_steps,
            max_steps,
            weight_decay: default_weight_decay(),
            adam_beta1: default_beta1(),
            adam_beta2: default_beta2(),
            adam_eps: default_eps(),
            batch_size,
            seed,
            checkpoint_every_steps: 0,
            grad_clip: None,
            corruption: CorruptionConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.max_steps == 0 || self.warmup_steps >= self.max_steps {
            return bad("warmup_steps must be below a positive max_steps");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.peak_lr.is_some_and(|lr| !(lr > 0.0)) || !(self.lr_multiplier > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return bad("Adam betas must lie in [0, 1) and eps must be positive");
        }
        if self.weight_decay < 0.0 || self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return bad("weight_decay must be non-negative and grad_clip positive");
        }
        Ok(())
    }

    pub fn resolved_peak_lr(&self, kind: ObjectiveKind, table: LrTable) -> f64 {
        self.peak_lr.unwrap_or_else(|| default_peak_lr(kind, table) * self.lr_multiplier)
    }
}

/// Linear warmup from 0 to `peak` over `warmup` steps, then linear decay to
/// 0 at `max_steps`.
pub fn lr_at(peak: f64, warmup: u64, max_steps: u64, step: u64) -> f64 {
    if step < warmup {
        peak * (step as f64 / warmup as f64)
    } else if step >= max_steps {
        0.0
    } else {
        peak * ((max_steps - step) as f64 / (max_steps - warmup) as f64)
    }
}

/// Decoupled-weight-decay Adam hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    /// One update of `param` in place; `t` is the 1-based update count.
    pub fn update(&self, param: &mut [f32], grad: &[f32], m: &mut [f32], v: &mut [f32], lr: f64, t: u64, decay: bool) {
        let bc1 = 1.0 - self.beta1.powi(t as i32);
        let bc2 = 1.0 - self.beta2.powi(t as i32);
        let wd = if decay { self.weight_decay } else { 0.0 };
        for i in 0..param.len() {
            let g = grad[i] as f64;
            let mi = self.beta1 * m[i] as f64 + (1.0 - self.beta1) * g;
            let vi = self.beta2 * v[i] as f64 + (1.0 - self.beta2) * g * g;
            m[i] = mi as f32;
            v[i] = vi as f32;
            let p = param[i] as f64;
            let step = (mi / bc1) / ((vi / bc2).sqrt() + self.eps) + wd * p;
            param[i] = (p - lr * step) as f32;
        }
    }
}

/// Everything needed to continue training bit-identically.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub config: ModelConfig,
    pub objective: ObjectiveKind,
    pub params: ModelParams<f32>,
    pub moments: OptimizerMoments,
    pub step: u64,
    pub seed: u64,
}

impl TrainState {
    pub fn new(config: ModelConfig, objective: ObjectiveKind, seed: u64) -> Result<Self> {
        let params = ModelParams::init(&config, seed)?;
        let moments = OptimizerMoments::zeros(&config);
        Ok(Self { config, objective, params, moments, step: 0, seed })
    }

    pub fn to_checkpoint(&self, vocab_fingerprint: u64) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            objective: Some(self.objective),
            step: self.step,
            seed: self.seed,
            vocab_fingerprint,
            params: self.params.clone(),
            moments: Some(self.moments.clone()),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let objective = ck.objective.ok_or_else(|| TrainError::Mismatch("checkpoint has no objective".into()))?;
        let moments = ck.moments.unwrap_or_else(|| OptimizerMoments::zeros(&ck.config));
        Ok(Self { config: ck.config, objective, params: ck.params, moments, step: ck.step, seed: ck.seed })
    }
}

/// Forward, backward and one AdamW update at `lr`. Returns the loss.
pub fn train_step(state: &mut TrainState, tc: &TrainConfig, batch: &LabeledBatch, lr: f64) -> Result<f64> {
    let mut tape: Tape<f32> = Tape::new();
    let vars = register(&mut tape, &state.params, true);
    let mut drop_rng = rng::stream(state.seed, Domain::Dropout, &[state.step]);
    let loss = objective_loss(
        &mut tape,
        &vars,
        &state.config,
        &batch.input_ids,
        &batch.attention_mask,
        batch.batch_size,
        &batch.labels,
        &batch.loss_mask,
        Some(&mut drop_rng),
    )?;
    let value = tape.value(loss).item() as f64;
    if !value.is_finite() {
        return Err(TrainError::NonFiniteLoss { step: state.step, batch_hash: batch.fingerprint(), loss: value });
    }
    tape.backward(loss)?;
    let mut grads: Vec<Vec<f32>> = vars.vars.iter().map(|&v| tape.take_grad(v)).collect();
    drop(tape);

    if let Some(clip) = tc.grad_clip {
        let norm = grads.iter().flatten().map(|&g| (g as f64) * (g as f64)).sum::<f64>().sqrt();
        if norm > clip {
            let s = (clip / norm) as f32;
            grads.iter_mut().flatten().for_each(|g| *g *= s);
        }
    }

    let adam = AdamW { beta1: tc.adam_beta1, beta2: tc.adam_beta2, eps: tc.adam_eps, weight_decay: tc.weight_decay };
    let t = state.step + 1;
    let specs = param_specs(&state.config);
    let moments = &mut state.moments;
    for (i, (p, g)) in state.params.tensors_mut().iter_mut().zip(&grads).enumerate() {
        adam.update(p.data_mut(), g, &mut moments.m[i], &mut moments.v[i], lr, t, specs[i].kind.decays());
    }
    state.step += 1;
    Ok(value)
}

/// Where step `step` reads its batch: `(epoch, batch index, sequence ids)`.
pub fn batch_plan(n: usize, batch_size: usize, seed: u64, step: u64) -> (u64, u64, Vec<usize>) {
    let per_epoch = n.div_ceil(batch_size) as u64;
    let epoch = step / per_epoch;
    let bi = step % per_epoch;
    let order = epoch_order(n, seed, epoch);
    let start = bi as usize * batch_size;
    let end = (start + batch_size).min(n);
    (epoch, bi, order[start..end].to_vec())
}

/// Produces the corrupted batch for one step.
pub struct BatchSource<'a> {
    pub corpus: &'a PackedCorpus,
    pub classes: &'a VocabClasses,
    pub objective: ObjectiveKind,
    pub corruption: CorruptionConfig,
    pub batch_size: usize,
    pub seed: u64,
}

impl BatchSource<'_> {
    pub fn batch(&self, step: u64) -> Result<LabeledBatch> {
        let (epoch, bi, idx) = batch_plan(self.corpus.len(), self.batch_size, self.seed, step);
        let seqs: Vec<_> = idx.iter().map(|&i| &self.corpus.sequences[i]).collect();
        Ok(make_batch(self.objective, &self.corruption, self.classes, &seqs, self.seed, epoch, bi)?)
    }

    pub fn epoch_fraction(&self, steps_done: u64) -> f64 {
        steps_done as f64 / self.corpus.batches_per_epoch(self.batch_size) as f64
    }
}

/// Output locations and logging switches for [`pretrain`].
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out_dir: Option<PathBuf>,
    /// Zero the wall-clock columns so repeated runs produce identical CSVs.
    pub deterministic: bool,
    /// Corruption prefetch threads; 0 corrupts inline.
    pub workers: usize,
    pub vocab_fingerprint: u64,
    pub lr_table: Option<LrTable>,
}

#[derive(Debug, Clone)]
pub struct PretrainReport {
    pub state: TrainState,
    /// `(step, loss)` for every step run in this call.
    pub losses: Vec<(u64, f64)>,
    pub seconds: f64,
    pub tokens: u64,
    pub checkpoints: Vec<PathBuf>,
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join("checkpoints").join(format!("step-{step:08}.ckpt"))
}

/// Runs steps `state.step..tc.max_steps`, streaming metrics and checkpoints
/// into `opts.out_dir` when set. `on_step` may stop training early by
/// returning false.
pub fn pretrain(
    corpus: &PackedCorpus,
    classes: &VocabClasses,
    mut state: TrainState,
    tc: &TrainConfig,
    opts: &RunOptions,
    mut on_step: impl FnMut(u64, f64) -> bool,
) -> Result<PretrainReport> {
    tc.validate()?;
    if corpus.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    if corpus.max_len > state.config.max_len {
        return Err(TrainError::Mismatch(format!(
            "corpus max_len {} exceeds model max_len {}",
            corpus.max_len, state.config.max_len
        )));
    }
    if classes.vocab_size != state.config.vocab_size {
        return Err(TrainError::Mismatch(format!(
            "vocabulary has {} ids, model expects {}",
            classes.vocab_size, state.config.vocab_size
        )));
    }
    let expected = state.objective.num_classes(state.config.vocab_size);
    if state.config.head_classes != expected {
        return Err(TrainError::Mismatch(format!("head has {} classes, objective needs {expected}", state.config.head_classes)));
    }
    let peak = tc.resolved_peak_lr(state.objective, opts.lr_table.unwrap_or(LrTable::Base));
    let source = BatchSource {
        corpus,
        classes,
        objective: state.objective,
        corruption: tc.corruption,
        batch_size: tc.batch_size,
        seed: state.seed,
    };

    let mut metrics = match &opts.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir.join("checkpoints"))?;
            let path = dir.join("metrics.csv");
            let fresh = state.step == 0 || !path.exists();
            let mut f = if fresh {
                std::fs::File::create(&path)?
            } else {
                OpenOptions::new().append(true).open(&path)?
            };
            if fresh {
                writeln!(f, "{METRICS_HEADER}")?;
            }
            Some(std::io::BufWriter::new(f))
        }
        None => None,
    };

    let start = Instant::now();
    let first = state.step;
    let mut losses = Vec::new();
    let mut tokens = 0u64;
    let mut checkpoints = Vec::new();

    std::thread::scope(|scope| -> Result<()> {
        let workers = opts.workers;
        let mut receivers = Vec::with_capacity(workers);
        for w in 0..workers {
            let (tx, rx) = mpsc::sync_channel::<Result<LabeledBatch>>(2);
            receivers.push(rx);
            let source = &source;
            let max = tc.max_steps;
            scope.spawn(move || {
                let mut s = first + w as u64;
                while s < max {
                    if tx.send(source.batch(s)).is_err() {
                        break;
                    }
                    s += workers as u64;
                }
            });
        }

        while state.step < tc.max_steps {
            let step = state.step;
            let batch = if workers == 0 {
                source.batch(step)?
            } else {
                receivers[((step - first) % workers as u64) as usize]
                    .recv()
                    .map_err(|_| TrainError::Config("batch worker stopped".into()))??
            };
            let lr = lr_at(peak, tc.warmup_steps, tc.max_steps, step);
            let loss = train_step(&mut state, tc, &batch, lr)?;
            tokens += batch.real_tokens() as u64;
            losses.push((step, loss));

            if let Some(f) = metrics.as_mut() {
                let (secs, tps) = if opts.deterministic {
                    (0.0, 0.0)
                } else {
                    let s = start.elapsed().as_secs_f64();
                    (s, tokens as f64 / s.max(1e-9))
                };
                writeln!(f, "{},{:.6},{:.6},{:.6e},{:.3},{:.1}", step, source.epoch_fraction(state.step), loss, lr, secs, tps)?;
            }
            let keep_going = on_step(step, loss);
            let every = tc.checkpoint_every_steps;
            let last = state.step == tc.max_steps || !keep_going;
            if let Some(dir) = &opts.out_dir {
                if (every > 0 && state.step.is_multiple_of(every)) || last {
                    let path = checkpoint_path(dir, state.step);
                    state.to_checkpoint(opts.vocab_fingerprint).save(&path)?;
                    checkpoints.push(path);
                }
            }
            if !keep_going {
                break;
            }
        }
        drop(receivers);
        Ok(())
    })?;
    if let Some(mut f) = metrics {
        f.flush()?;
    }
    Ok(PretrainReport { state, losses, seconds: start.elapsed().as_secs_f64(), tokens, checkpoints })
}

/// Trailing means over every full window of `window` values.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    let mut out = Vec::with_capacity(values.len().saturating_sub(w - 1));
    let mut sum: f64 = values.iter().take(w).sum();
    if values.len() < w {
        return out;
    }
    out.push(sum / w as f64);
    for i in w..values.len() {
        sum += values[i] - values[i - w];
        out.push(sum / w as f64);
    }
    out
}
