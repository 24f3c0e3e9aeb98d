use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{ProbeError, ProbeTask, Result};
use crate::autodiff::Tape;
use crate::corpus::{TokenSequence, MIN_MAX_LEN};
use crate::model::{param_specs, register, sequence_logits, Checkpoint, ModelConfig, ModelParams, OptimizerMoments};
use crate::rng::{self, Domain};
use crate::tokenizer::Vocab;
use crate::trainer::{lr_at, AdamW};

fn default_epochs() -> usize {
    20
}
fn default_batch() -> usize {
    16
}
fn default_lr() -> f64 {
    3e-5
}
fn default_one() -> f64 {
    1.0
}
fn default_warmup() -> f64 {
    0.06
}
fn default_patience() -> f64 {
    0.05
}
fn default_min_patience() -> u64 {
    50
}
fn default_eval() -> f64 {
    0.01
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    #[serde(default = "default_epochs")]
    pub epochs_max: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Peak learning rate before `lr_multiplier`.
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_one")]
    pub lr_multiplier: f64,
    /// Warmup length as a fraction of the full step budget.
    #[serde(default = "default_warmup")]
    pub warmup_frac: f64,
    #[serde(default)]
    pub weight_decay: f64,
    /// Stop once dev accuracy has not improved for this fraction of steps.
    #[serde(default = "default_patience")]
    pub patience_frac: f64,
    /// Lower bound on the patience in steps, for tasks whose whole budget
    /// is only a few hundred steps.
    #[serde(default = "default_min_patience")]
    pub min_patience_steps: u64,
    /// Dev evaluation interval as a fraction of the step budget.
    #[serde(default = "default_eval")]
    pub eval_every_frac: f64,
    /// Threads fine-tuning seeds concurrently; 0 or 1 runs them in turn.
    #[serde(default)]
    pub workers: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs_max: default_epochs(),
            batch_size: default_batch(),
            lr: default_lr(),
            lr_multiplier: 1.0,
            warmup_frac: default_warmup(),
            weight_decay: 0.0,
            patience_frac: default_patience(),
            min_patience_steps: default_min_patience(),
            eval_every_frac: default_eval(),
            workers: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        let frac = |x: f64| (0.0..=1.0).contains(&x);
        if self.epochs_max == 0 || self.batch_size == 0 {
            return Err(ProbeError::Config("epochs_max and batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr_multiplier > 0.0) || self.weight_decay < 0.0 {
            return Err(ProbeError::Config("learning rate must be positive, weight decay non-negative".into()));
        }
        if !frac(self.warmup_frac) || !frac(self.patience_frac) || !frac(self.eval_every_frac) {
            return Err(ProbeError::Config("fractions must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedResult {
    pub seed: u64,
    /// Dev accuracy of the fresh head before any update.
    pub initial_accuracy: f64,
    /// Best dev accuracy seen; this is the reported score.
    pub best_accuracy: f64,
    pub best_step: u64,
    pub steps_run: u64,
    pub step_budget: u64,
    /// `(step, dev accuracy)` at every evaluation, starting with step 0.
    pub history: Vec<(u64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneReport {
    pub runs: Vec<SeedResult>,
    pub mean: f64,
    /// Sample standard deviation across seeds (0 for a single seed).
    pub std: f64,
}

impl FinetuneReport {
    pub fn accuracies(&self) -> Vec<f64> {
        self.runs.iter().map(|r| r.best_accuracy).collect()
    }
}

pub(crate) fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Untrained encoder in checkpoint form, the baseline for transfer
/// comparisons.
pub fn random_init_checkpoint(config: &ModelConfig, seed: u64, vocab_fingerprint: u64) -> Result<Checkpoint> {
    Ok(Checkpoint {
        config: config.clone(),
        objective: None,
        step: 0,
        seed,
        vocab_fingerprint,
        params: ModelParams::init(config, seed)?,
        moments: None,
    })
}

struct Encoded {
    len: usize,
    train: Vec<(TokenSequence, u32)>,
    dev: Vec<(TokenSequence, u32)>,
}

fn encode_task(vocab: &Vocab, task: &ProbeTask, max_len: usize) -> Result<Encoded> {
    let mut enc = vocab.encoder();
    let train_ids: Vec<Vec<u32>> = task.train.iter().map(|e| enc.encode(&e.text)).collect();
    let dev_ids: Vec<Vec<u32>> = task.dev.iter().map(|e| enc.encode(&e.text)).collect();
    let longest = train_ids.iter().chain(&dev_ids).map(Vec::len).max().unwrap_or(0) + 2;
    if longest > max_len {
        return Err(ProbeError::Mismatch(format!("task needs {longest} positions, model has {max_len}")));
    }
    let len = longest.max(MIN_MAX_LEN).min(max_len);
    let wrap = |ids: Vec<Vec<u32>>, ex: &[super::Example]| -> Result<Vec<(TokenSequence, u32)>> {
        ids.iter()
            .zip(ex)
            .map(|(c, e)| {
                let s = TokenSequence::from_content(c, len).map_err(|err| ProbeError::Task(err.to_string()))?;
                Ok((s, e.label as u32))
            })
            .collect()
    };
    Ok(Encoded { len, train: wrap(train_ids, &task.train)?, dev: wrap(dev_ids, &task.dev)? })
}

fn stack(rows: &[&(TokenSequence, u32)]) -> (Vec<u32>, Vec<u8>, Vec<u32>) {
    let ids = rows.iter().flat_map(|r| r.0.ids.iter().copied()).collect();
    let mask = rows.iter().flat_map(|r| r.0.attention_mask.iter().copied()).collect();
    let labels = rows.iter().map(|r| r.1).collect();
    (ids, mask, labels)
}

fn dev_accuracy(params: &ModelParams<f32>, config: &ModelConfig, dev: &[(TokenSequence, u32)]) -> Result<f64> {
    let mut correct = 0usize;
    for chunk in dev.chunks(64) {
        let refs: Vec<_> = chunk.iter().collect();
        let (ids, mask, labels) = stack(&refs);
        let mut tape: Tape<f32> = Tape::new();
        let vars = register(&mut tape, params, false);
        let logits = sequence_logits(&mut tape, &vars, config, &ids, &mask, chunk.len(), None)?;
        let c = config.head_classes;
        for (row, &label) in tape.value(logits).data().chunks(c).zip(&labels) {
            let mut best = 0;
            for j in 1..c {
                if row[j] > row[best] {
                    best = j;
                }
            }
            correct += (best as u32 == label) as usize;
        }
    }
    Ok(correct as f64 / dev.len().max(1) as f64)
}

fn check_fit(ck: &Checkpoint, vocab: &Vocab) -> Result<()> {
    if ck.config.vocab_size != vocab.size() {
        return Err(ProbeError::Mismatch(format!(
            "checkpoint embeds {} ids, vocabulary has {}",
            ck.config.vocab_size,
            vocab.size()
        )));
    }
    if ck.vocab_fingerprint != vocab.fingerprint() {
        return Err(ProbeError::Mismatch(format!(
            "checkpoint was trained with vocabulary {:016x}, got {:016x}",
            ck.vocab_fingerprint,
            vocab.fingerprint()
        )));
    }
    Ok(())
}

fn run_seed(ck: &Checkpoint, data: &Encoded, classes: usize, seed: u64, cfg: &FinetuneConfig) -> Result<SeedResult> {
    let (config, mut params) = ck.params.with_fresh_head(&ck.config, classes, seed)?;
    let specs = param_specs(&config);
    let mut moments = OptimizerMoments::zeros(&config);
    let adam = AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: cfg.weight_decay };
    let per_epoch = data.train.len().div_ceil(cfg.batch_size) as u64;
    let budget = per_epoch * cfg.epochs_max as u64;
    let warmup = (cfg.warmup_frac * budget as f64).ceil() as u64;
    let eval_every = ((cfg.eval_every_frac * budget as f64).round() as u64).max(1);
    let patience = ((cfg.patience_frac * budget as f64).ceil() as u64).max(eval_every).max(cfg.min_patience_steps);
    let peak = cfg.lr * cfg.lr_multiplier;

    let initial = dev_accuracy(&params, &config, &data.dev)?;
    let mut history = vec![(0, initial)];
    let (mut best, mut best_step) = (initial, 0u64);
    let mut step = 0u64;
    'epochs: for epoch in 0..cfg.epochs_max as u64 {
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut rng::stream(seed, Domain::Finetune, &[1, epoch]));
        for idx in order.chunks(cfg.batch_size) {
            let rows: Vec<_> = idx.iter().map(|&i| &data.train[i]).collect();
            let (ids, mask, labels) = stack(&rows);
            let mut tape: Tape<f32> = Tape::new();
            let vars = register(&mut tape, &params, true);
            let mut drop_rng = rng::stream(seed, Domain::Finetune, &[2, step]);
            let logits = sequence_logits(&mut tape, &vars, &config, &ids, &mask, rows.len(), Some(&mut drop_rng))?;
            let loss = tape.cross_entropy_masked(logits, &labels, &vec![1; rows.len()])?;
            tape.backward(loss)?;
            let grads: Vec<Vec<f32>> = vars.vars.iter().map(|&v| tape.take_grad(v)).collect();
            drop(tape);
            let lr = lr_at(peak, warmup, budget, step);
            for (i, (p, g)) in params.tensors_mut().iter_mut().zip(&grads).enumerate() {
                adam.update(p.data_mut(), g, &mut moments.m[i], &mut moments.v[i], lr, step + 1, specs[i].kind.decays());
            }
            step += 1;

            if step.is_multiple_of(eval_every) || step == budget {
                let acc = dev_accuracy(&params, &config, &data.dev)?;
                history.push((step, acc));
                if acc > best {
                    best = acc;
                    best_step = step;
                } else if step >= warmup && step - best_step.max(warmup) >= patience {
                    break 'epochs;
                }
            }
        }
    }
    Ok(SeedResult {
        seed,
        initial_accuracy: initial,
        best_accuracy: best,
        best_step,
        steps_run: step,
        step_budget: budget,
        history,
    })
}

/// Fine-tunes a fresh classification head (plus the encoder) on the CLS
/// representation once per seed, with early stopping on dev accuracy.
pub fn finetune(
    ck: &Checkpoint,
    vocab: &Vocab,
    task: &ProbeTask,
    seeds: &[u64],
    cfg: &FinetuneConfig,
) -> Result<FinetuneReport> {
    cfg.validate()?;
    check_fit(ck, vocab)?;
    if seeds.is_empty() {
        return Err(ProbeError::Config("at least one seed is required".into()));
    }
    if task.train.is_empty() || task.dev.is_empty() {
        return Err(ProbeError::Task("train and dev sets must be nonempty".into()));
    }
    let data = encode_task(vocab, task, ck.config.max_len)?;
    debug_assert!(data.len <= ck.config.max_len);
    let classes = task.num_classes();

    let workers = cfg.workers.clamp(1, seeds.len());
    let mut slots: Vec<Option<Result<SeedResult>>> = (0..seeds.len()).map(|_| None).collect();
    if workers == 1 {
        for (slot, &s) in slots.iter_mut().zip(seeds) {
            *slot = Some(run_seed(ck, &data, classes, s, cfg));
        }
    } else {
        std::thread::scope(|scope| {
            let chunk = seeds.len().div_ceil(workers);
            for (out, ss) in slots.chunks_mut(chunk).zip(seeds.chunks(chunk)) {
                let data = &data;
                scope.spawn(move || {
                    for (slot, &s) in out.iter_mut().zip(ss) {
                        *slot = Some(run_seed(ck, data, classes, s, cfg));
                    }
                });
            }
        });
    }
    let runs = slots.into_iter().map(|s| s.expect("every seed ran")).collect::<Result<Vec<_>>>()?;
    let (mean, std) = mean_std(&runs.iter().map(|r| r.best_accuracy).collect::<Vec<_>>());
    Ok(FinetuneReport { runs, mean, std })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankRow {
    pub name: String,
    pub mean: f64,
    pub std: f64,
    pub accuracies: Vec<f64>,
}

/// Fine-tunes every named checkpoint with the same seeds and ranks them by
/// mean dev accuracy, best first.
pub fn compare_objectives(
    checkpoints: &[(String, Checkpoint)],
    vocab: &Vocab,
    task: &ProbeTask,
    seeds: &[u64],
    cfg: &FinetuneConfig,
) -> Result<Vec<RankRow>> {
    let mut rows = Vec::with_capacity(checkpoints.len());
    for (name, ck) in checkpoints {
        let r = finetune(ck, vocab, task, seeds, cfg)?;
        rows.push(RankRow { name: name.clone(), mean: r.mean, std: r.std, accuracies: r.accuracies() });
    }
    rows.sort_by(|a, b| b.mean.total_cmp(&a.mean).then_with(|| a.name.cmp(&b.name)));
    Ok(rows)
}

pub fn ranking_csv(rows: &[RankRow]) -> String {
    let mut s = String::from("objective,mean,std,runs\n");
    for r in rows {
        let runs: Vec<String> = r.accuracies.iter().map(|a| format!("{a:.4}")).collect();
        let _ = writeln!(s, "{},{:.4},{:.4},{}", r.name, r.mean, r.std, runs.join(" "));
    }
    s
}

pub fn ranking_text(rows: &[RankRow]) -> String {
    let w = rows.iter().map(|r| r.name.len()).max().unwrap_or(0).max("objective".len());
    let mut s = format!("{:<w$}  {:>7}  {:>7}\n", "objective", "mean", "std");
    for r in rows {
        let _ = writeln!(s, "{:<w$}  {:>7.4}  {:>7.4}", r.name, r.mean, r.std);
    }
    s
}
