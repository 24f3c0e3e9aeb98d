//! Command-line front end. [`dispatch`] parses argv, runs one subcommand and
//! maps every failure to a one-line `error[class]: message` report.

use std::io::Read as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::corpus::{self, synth, CorpusError, Overlong, PackedCorpus};
use crate::model::{Checkpoint, CheckpointError, ModelConfig, ModelError, Preset};
use crate::objectives::{self, shard::Shard, CorruptionConfig, ObjectiveError, ObjectiveKind, VocabClasses};
use crate::probe::{self, FinetuneConfig, ProbeError, ProbeTask, SyntheticGrammar};
use crate::rng::{self, Domain};
use crate::tokenizer::{self, TokenizerError, Vocab};
use crate::trainer::{self, plot, LrTable, RunOptions, TrainConfig, TrainError, TrainState};

/// A failure with a stable machine-readable class.
#[derive(Debug)]
pub struct CliError {
    pub class: &'static str,
    pub message: String,
}

impl CliError {
    fn new(class: &'static str, message: impl Into<String>) -> Self {
        Self { class, message: message.into() }
    }

    fn config(message: impl Into<String>) -> Self {
        Self::new("config", message)
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let one_line = self.message.replace('\n', " ");
        write!(f, "error[{}]: {}", self.class, one_line.trim())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::new("io", e.to_string())
    }
}

impl From<TokenizerError> for CliError {
    fn from(e: TokenizerError) -> Self {
        match e {
            TokenizerError::Io(io) => io.into(),
            other => Self::new("tokenizer", other.to_string()),
        }
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        match e {
            CorpusError::Io(io) => io.into(),
            CorpusError::FingerprintMismatch { .. } => Self::new("mismatch", e.to_string()),
            other => Self::new("corpus", other.to_string()),
        }
    }
}

impl From<ObjectiveError> for CliError {
    fn from(e: ObjectiveError) -> Self {
        Self::new("objective", e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) => Self::config(e.to_string()),
            other => Self::new("model", other.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Io(io) => io.into(),
            CheckpointError::Model(m) => m.into(),
            other => Self::new("checkpoint", other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => Self::config(e.to_string()),
            TrainError::Mismatch(_) => Self::new("mismatch", e.to_string()),
            TrainError::EmptyCorpus => Self::new("corpus", e.to_string()),
            TrainError::Model(m) => m.into(),
            TrainError::Objective(o) => o.into(),
            TrainError::Checkpoint(c) => c.into(),
            TrainError::Io(io) => io.into(),
            TrainError::NonFiniteLoss { .. } => Self::new("train", e.to_string()),
        }
    }
}

impl From<ProbeError> for CliError {
    fn from(e: ProbeError) -> Self {
        match e {
            ProbeError::Mismatch(_) => Self::new("mismatch", e.to_string()),
            ProbeError::Task(_) => Self::new("task", e.to_string()),
            ProbeError::Config(_) => Self::config(e.to_string()),
            ProbeError::Model(m) => m.into(),
            ProbeError::Checkpoint(c) => c.into(),
            ProbeError::Io(io) => io.into(),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "tokenlab", version, about = "Token-level pretraining objectives on a small transformer encoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic English-like corpus (one document per line).
    GenerateCorpus(GenerateArgs),
    /// Learn a byte-level BPE vocabulary from a text corpus.
    TrainTokenizer(TokenizerArgs),
    /// Tokenize and pack a text corpus into fixed-length sequences.
    Pack(PackArgs),
    /// Pretrain an encoder with one objective.
    Pretrain(Box<PretrainArgs>),
    /// Show how an objective corrupts and labels one batch.
    InspectBatch(InspectArgs),
    /// Fine-tune a checkpoint on a probe task over several seeds.
    Finetune(FinetuneArgs),
    /// Fine-tune several checkpoints on one task and rank them.
    Compare(CompareArgs),
    /// Render loss curves from metrics CSVs as SVG.
    Plot(PlotArgs),
}

#[derive(Args, Debug, Serialize)]
struct GenerateArgs {
    /// Output directory; receives corpus.txt.
    #[arg(long)]
    out: PathBuf,
    /// Minimum corpus size in bytes.
    #[arg(long, default_value_t = 1_000_000)]
    bytes: usize,
    /// Root seed of the generator.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug, Serialize)]
struct TokenizerArgs {
    /// Text corpus, one document per line.
    #[arg(long)]
    corpus: PathBuf,
    /// Target vocabulary size, specials and byte tokens included.
    #[arg(long, default_value_t = 2048)]
    vocab_size: usize,
    /// Output directory; receives vocab.txt.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct PackArgs {
    /// Text corpus, one document per line.
    #[arg(long)]
    corpus: PathBuf,
    /// vocab.txt from train-tokenizer.
    #[arg(long)]
    vocab: PathBuf,
    /// Sequence length including CLS and SEP.
    #[arg(long, default_value_t = 64)]
    max_len: usize,
    /// Split overlong documents instead of truncating them.
    #[arg(long)]
    split_long: bool,
    /// Output directory; receives corpus.bin.
    #[arg(long)]
    out: PathBuf,
}

/// Pretraining settings. Every key is optional in the file and overridable
/// on the command line; the fully resolved form is written to
/// `<out>/config.toml`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub objective: Option<ObjectiveKind>,
    pub preset: Option<String>,
    pub corpus: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    pub vocab_size: Option<usize>,
    pub max_len: Option<usize>,
    pub split_long: Option<bool>,
    pub workers: Option<usize>,
    pub deterministic: Option<bool>,
    pub model: ModelOverrides,
    pub train: TrainOverrides,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelOverrides {
    pub layers: Option<usize>,
    pub heads: Option<usize>,
    pub d_hidden: Option<usize>,
    pub d_ff: Option<usize>,
    pub dropout: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainOverrides {
    pub peak_lr: Option<f64>,
    pub lr_multiplier: Option<f64>,
    pub warmup_steps: Option<u64>,
    pub max_steps: Option<u64>,
    pub weight_decay: Option<f64>,
    pub adam_beta1: Option<f64>,
    pub adam_beta2: Option<f64>,
    pub adam_eps: Option<f64>,
    pub batch_size: Option<usize>,
    pub seed: Option<u64>,
    pub checkpoint_every_steps: Option<u64>,
    pub grad_clip: Option<f64>,
    pub rate: Option<f64>,
    pub shuffle_rate: Option<f64>,
    pub random_rate: Option<f64>,
    pub allow_fixed_points: Option<bool>,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    /// TOML run config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// mlm, shuffle, random, shuffle_random, token_type, first_char or masked_stopword.
    #[arg(long)]
    objective: Option<String>,
    /// paper-base, paper-medium, paper-small, tiny-base, tiny-medium or tiny-small.
    #[arg(long)]
    preset: Option<String>,
    /// Text corpus (one document per line) or a packed corpus.bin.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Existing vocab.txt; trained from the corpus when omitted.
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Target vocabulary size when training a tokenizer.
    #[arg(long)]
    vocab_size: Option<usize>,
    /// Sequence length including CLS and SEP (default 64).
    #[arg(long)]
    max_len: Option<usize>,
    /// Split overlong documents instead of truncating them.
    #[arg(long)]
    split_long: bool,
    /// Total optimizer steps.
    #[arg(long)]
    steps: Option<u64>,
    /// Linear warmup steps (default steps / 10).
    #[arg(long)]
    warmup_steps: Option<u64>,
    /// Sequences per step (default 32).
    #[arg(long)]
    batch_size: Option<usize>,
    /// Overrides the per-objective peak learning rate.
    #[arg(long)]
    peak_lr: Option<f64>,
    /// Scales the per-objective peak learning rate.
    #[arg(long)]
    lr_multiplier: Option<f64>,
    /// Decoupled weight decay on weight matrices (default 0.01).
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Adam first-moment decay (default 0.9).
    #[arg(long)]
    adam_beta1: Option<f64>,
    /// Adam second-moment decay (default 0.999).
    #[arg(long)]
    adam_beta2: Option<f64>,
    /// Adam epsilon (default 1e-8).
    #[arg(long)]
    adam_eps: Option<f64>,
    /// Checkpoint interval in steps; 0 keeps only the final checkpoint.
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// Global gradient-norm clip (off by default).
    #[arg(long)]
    grad_clip: Option<f64>,
    /// Corruption rate for single-manipulation objectives.
    #[arg(long)]
    rate: Option<f64>,
    /// Shuffle share for shuffle_random.
    #[arg(long)]
    shuffle_rate: Option<f64>,
    /// Random-replacement share for shuffle_random.
    #[arg(long)]
    random_rate: Option<f64>,
    /// Let shuffled positions keep their original token.
    #[arg(long)]
    allow_fixed_points: bool,
    /// Encoder layers (overrides the preset).
    #[arg(long)]
    layers: Option<usize>,
    /// Attention heads (overrides the preset).
    #[arg(long)]
    heads: Option<usize>,
    /// Hidden width (overrides the preset).
    #[arg(long)]
    d_hidden: Option<usize>,
    /// Feed-forward width (overrides the preset).
    #[arg(long)]
    d_ff: Option<usize>,
    /// Dropout probability (default 0.1).
    #[arg(long)]
    dropout: Option<f64>,
    /// Root seed for initialisation, batch order, corruption and dropout.
    #[arg(long)]
    seed: Option<u64>,
    /// Corruption prefetch threads (0 corrupts inline).
    #[arg(long)]
    workers: Option<usize>,
    /// Write zeros in the wall-clock metric columns.
    #[arg(long)]
    deterministic: bool,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Run directory for config.toml, metrics.csv and checkpoints/.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Progress line interval on stderr (0 silences it).
    #[arg(long, default_value_t = 100)]
    log_every: u64,
}

#[derive(Args, Debug, Serialize)]
struct InspectArgs {
    /// Objective name, as for pretrain.
    #[arg(long)]
    objective: String,
    /// Text corpus or packed corpus.bin.
    #[arg(long)]
    corpus: PathBuf,
    /// Required for a packed corpus; trained in memory otherwise.
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Vocabulary size when training in memory.
    #[arg(long, default_value_t = 2048)]
    vocab_size: usize,
    /// Sequence length including CLS and SEP.
    #[arg(long, default_value_t = 64)]
    max_len: usize,
    /// Split overlong documents instead of truncating them.
    #[arg(long)]
    split_long: bool,
    /// Sequences in the batch.
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    /// Root seed, as for pretrain.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Training step whose batch is shown.
    #[arg(long, default_value_t = 0)]
    step: u64,
    /// Rows printed.
    #[arg(long, default_value_t = 2)]
    rows: usize,
    /// Corruption rate override.
    #[arg(long)]
    rate: Option<f64>,
    /// Also write the whole batch as a binary shard.
    #[arg(long, requires = "out")]
    export: bool,
    /// Output directory for batch.txt and, with --export, batch.shard.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct ProbeOpts {
    /// Probe task TSV (text TAB label) or `synthetic`.
    #[arg(long, default_value = "synthetic")]
    task: String,
    /// Number of fine-tuning seeds.
    #[arg(long, default_value_t = 5)]
    seeds: usize,
    /// Root seed for task generation, splits and fine-tuning.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Synthetic task training examples.
    #[arg(long, default_value_t = 400)]
    n_train: usize,
    /// Synthetic task dev examples.
    #[arg(long, default_value_t = 400)]
    n_dev: usize,
    /// Dev examples per class when splitting a TSV task.
    #[arg(long, default_value_t = 50)]
    dev_per_class: usize,
    /// Upper bound on fine-tuning epochs.
    #[arg(long, default_value_t = 20)]
    epochs_max: usize,
    /// Fine-tuning batch size.
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    /// Peak fine-tuning learning rate before the multiplier.
    #[arg(long, default_value_t = 3e-5)]
    lr: f64,
    /// Scales the fine-tuning learning rate.
    #[arg(long, default_value_t = 1.0)]
    lr_multiplier: f64,
    /// Seeds fine-tuned concurrently.
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args, Debug, Serialize)]
struct FinetuneArgs {
    /// Pretraining checkpoint (.ckpt).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Defaults to vocab.txt of the run that wrote the checkpoint.
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Replace the checkpoint weights with a fresh initialisation of the
    /// same architecture.
    #[arg(long)]
    random_init: bool,
    #[command(flatten)]
    probe: ProbeOpts,
    /// Output directory for finetune.csv, summary.txt, task.tsv and config.toml.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct CompareArgs {
    /// Directory of .ckpt files and/or pretraining run directories.
    #[arg(long)]
    checkpoints: PathBuf,
    /// vocab.txt shared by all checkpoints.
    #[arg(long)]
    vocab: PathBuf,
    /// Add a randomly initialised encoder as a baseline row.
    #[arg(long)]
    include_random_init: bool,
    #[command(flatten)]
    probe: ProbeOpts,
    /// Output directory for ranking.csv and ranking.txt.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct PlotArgs {
    /// One or more metrics.csv files.
    #[arg(long, num_args = 1.., required = true)]
    metrics: Vec<PathBuf>,
    /// Legend names, one per metrics file (default: parent directory name).
    #[arg(long, num_args = 1..)]
    labels: Vec<String>,
    /// Moving-average window in steps.
    #[arg(long, default_value_t = 100)]
    smooth: usize,
    /// SVG file to write.
    #[arg(long)]
    out: PathBuf,
}

/// Runs the command line `argv` (including the program name) and returns
/// the process exit code.
pub fn dispatch<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("{}", CliError::new("usage", first));
            return 2;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            1
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenerateCorpus(a) => generate_corpus(a),
        Command::TrainTokenizer(a) => train_tokenizer(a),
        Command::Pack(a) => pack(a),
        Command::Pretrain(a) => pretrain(*a),
        Command::InspectBatch(a) => inspect_batch(a),
        Command::Finetune(a) => finetune(a),
        Command::Compare(a) => compare(a),
        Command::Plot(a) => plot_cmd(a),
    }
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::config(format!("{what} not found: {}", path.display())))
    }
}

fn prepare_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn write_args<T: Serialize>(dir: &Path, args: &T) -> Result<()> {
    let text = toml::to_string(args).map_err(|e| CliError::config(e.to_string()))?;
    std::fs::write(dir.join("config.toml"), text)?;
    Ok(())
}

fn is_packed(path: &Path) -> Result<bool> {
    let mut head = [0u8; 8];
    let mut f = std::fs::File::open(path)?;
    let n = f.read(&mut head)?;
    Ok(n == 8 && &head == corpus::CORPUS_MAGIC)
}

/// Loads or trains the vocabulary and packs (or loads) the corpus.
fn corpus_and_vocab(
    corpus_path: &Path,
    vocab_path: Option<&Path>,
    vocab_size: usize,
    max_len: usize,
    overlong: Overlong,
) -> Result<(Vocab, PackedCorpus, bool)> {
    require_file(corpus_path, "corpus")?;
    if let Some(v) = vocab_path {
        require_file(v, "vocabulary")?;
    }
    if is_packed(corpus_path)? {
        let vp = vocab_path.ok_or_else(|| CliError::config("a packed corpus needs --vocab"))?;
        let vocab = Vocab::load(vp)?;
        let packed = PackedCorpus::load(corpus_path)?;
        packed.check_vocab(&vocab)?;
        return Ok((vocab, packed, false));
    }
    let docs = corpus::read_documents(corpus_path)?;
    let (vocab, trained) = match vocab_path {
        Some(v) => (Vocab::load(v)?, false),
        None => (tokenizer::train_bpe(&docs, vocab_size)?, true),
    };
    let packed = corpus::pack_with(&vocab, &docs, max_len, overlong)?;
    Ok((vocab, packed, trained))
}

fn overlong(split: bool) -> Overlong {
    if split {
        Overlong::Split
    } else {
        Overlong::Truncate
    }
}

fn generate_corpus(a: GenerateArgs) -> Result<()> {
    prepare_out(&a.out)?;
    write_args(&a.out, &a)?;
    let docs = synth::generate_corpus(a.seed, a.bytes);
    let mut text = docs.join("\n");
    text.push('\n');
    std::fs::write(a.out.join("corpus.txt"), &text)?;
    println!("wrote {} documents, {} bytes", docs.len(), text.len());
    Ok(())
}

fn train_tokenizer(a: TokenizerArgs) -> Result<()> {
    require_file(&a.corpus, "corpus")?;
    let docs = corpus::read_documents(&a.corpus)?;
    let vocab = tokenizer::train_bpe(&docs, a.vocab_size)?;
    prepare_out(&a.out)?;
    write_args(&a.out, &a)?;
    vocab.save(&a.out.join("vocab.txt"))?;
    println!("vocabulary of {} tokens, fingerprint {:016x}", vocab.size(), vocab.fingerprint());
    Ok(())
}

fn pack(a: PackArgs) -> Result<()> {
    let (_, packed, _) = corpus_and_vocab(&a.corpus, Some(&a.vocab), 0, a.max_len, overlong(a.split_long))?;
    prepare_out(&a.out)?;
    write_args(&a.out, &a)?;
    packed.save(&a.out.join("corpus.bin"))?;
    println!("{} sequences of max_len {}, {} content tokens", packed.len(), packed.max_len, packed.content_tokens());
    Ok(())
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        require_file(path, "config file")?;
        toml::from_str(&std::fs::read_to_string(path)?).map_err(|e| CliError::config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Command-line values take precedence over the file.
    fn apply_flags(mut self, a: &PretrainArgs) -> Result<Self> {
        fn over<T: Clone>(slot: &mut Option<T>, flag: &Option<T>) {
            if flag.is_some() {
                *slot = flag.clone();
            }
        }
        if let Some(name) = &a.objective {
            self.objective = Some(ObjectiveKind::from_name(name)?);
        }
        over(&mut self.preset, &a.preset);
        over(&mut self.corpus, &a.corpus);
        over(&mut self.vocab, &a.vocab);
        over(&mut self.out, &a.out);
        over(&mut self.resume, &a.resume);
        over(&mut self.vocab_size, &a.vocab_size);
        over(&mut self.max_len, &a.max_len);
        over(&mut self.workers, &a.workers);
        if a.deterministic {
            self.deterministic = Some(true);
        }
        if a.split_long {
            self.split_long = Some(true);
        }
        let m = &mut self.model;
        over(&mut m.layers, &a.layers);
        over(&mut m.heads, &a.heads);
        over(&mut m.d_hidden, &a.d_hidden);
        over(&mut m.d_ff, &a.d_ff);
        over(&mut m.dropout, &a.dropout);
        let t = &mut self.train;
        over(&mut t.peak_lr, &a.peak_lr);
        over(&mut t.lr_multiplier, &a.lr_multiplier);
        over(&mut t.warmup_steps, &a.warmup_steps);
        over(&mut t.max_steps, &a.steps);
        over(&mut t.weight_decay, &a.weight_decay);
        over(&mut t.adam_beta1, &a.adam_beta1);
        over(&mut t.adam_beta2, &a.adam_beta2);
        over(&mut t.adam_eps, &a.adam_eps);
        over(&mut t.batch_size, &a.batch_size);
        over(&mut t.seed, &a.seed);
        over(&mut t.checkpoint_every_steps, &a.checkpoint_every);
        over(&mut t.grad_clip, &a.grad_clip);
        over(&mut t.rate, &a.rate);
        over(&mut t.shuffle_rate, &a.shuffle_rate);
        over(&mut t.random_rate, &a.random_rate);
        if a.allow_fixed_points {
            t.allow_fixed_points = Some(true);
        }
        Ok(self)
    }
}

/// A run config with every setting decided.
struct Resolved {
    objective: ObjectiveKind,
    preset: Preset,
    corpus: PathBuf,
    out: PathBuf,
    vocab_size: usize,
    max_len: usize,
    split_long: bool,
    workers: usize,
    deterministic: bool,
    model: ModelOverrides,
    train: TrainConfig,
}

fn resolve(rc: &RunConfig) -> Result<Resolved> {
    let objective = rc.objective.ok_or_else(|| CliError::config("--objective is required"))?;
    let preset_name = rc.preset.clone().unwrap_or_else(|| "tiny-base".into());
    let preset = Preset::from_name(&preset_name).ok_or_else(|| CliError::config(format!("unknown preset {preset_name:?}")))?;
    let corpus = rc.corpus.clone().ok_or_else(|| CliError::config("--corpus is required"))?;
    let out = rc.out.clone().ok_or_else(|| CliError::config("--out is required"))?;
    let t = &rc.train;
    let max_steps = t.max_steps.ok_or_else(|| CliError::config("--steps is required"))?;
    let defaults = TrainConfig::new(max_steps, t.warmup_steps.unwrap_or(max_steps / 10), t.batch_size.unwrap_or(32), 0);
    let dc = CorruptionConfig::default();
    let train = TrainConfig {
        peak_lr: t.peak_lr,
        lr_multiplier: t.lr_multiplier.unwrap_or(defaults.lr_multiplier),
        weight_decay: t.weight_decay.unwrap_or(defaults.weight_decay),
        adam_beta1: t.adam_beta1.unwrap_or(defaults.adam_beta1),
        adam_beta2: t.adam_beta2.unwrap_or(defaults.adam_beta2),
        adam_eps: t.adam_eps.unwrap_or(defaults.adam_eps),
        seed: t.seed.unwrap_or(0),
        checkpoint_every_steps: t.checkpoint_every_steps.unwrap_or(0),
        grad_clip: t.grad_clip,
        corruption: CorruptionConfig {
            rate: t.rate.unwrap_or(dc.rate),
            shuffle_rate: t.shuffle_rate.unwrap_or(dc.shuffle_rate),
            random_rate: t.random_rate.unwrap_or(dc.random_rate),
            allow_fixed_points: t.allow_fixed_points.unwrap_or(dc.allow_fixed_points),
        },
        ..defaults
    };
    train.validate()?;
    Ok(Resolved {
        objective,
        preset,
        corpus,
        out,
        vocab_size: rc.vocab_size.unwrap_or(2048),
        max_len: rc.max_len.unwrap_or(64),
        split_long: rc.split_long.unwrap_or(false),
        workers: rc.workers.unwrap_or(1),
        deterministic: rc.deterministic.unwrap_or(false),
        model: rc.model.clone(),
        train,
    })
}

fn model_config(r: &Resolved, vocab_size: usize) -> ModelConfig {
    let mut c = r.preset.config(vocab_size, r.max_len, r.objective.num_classes(vocab_size));
    let m = &r.model;
    c.layers = m.layers.unwrap_or(c.layers);
    c.heads = m.heads.unwrap_or(c.heads);
    c.d_hidden = m.d_hidden.unwrap_or(c.d_hidden);
    c.d_ff = m.d_ff.unwrap_or(c.d_ff);
    c.dropout = m.dropout.unwrap_or(c.dropout);
    c
}

fn pretrain(a: PretrainArgs) -> Result<()> {
    let base = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let rc = base.apply_flags(&a)?;
    let r = resolve(&rc)?;
    require_file(&r.corpus, "corpus")?;
    if let Some(p) = &rc.resume {
        require_file(p, "checkpoint")?;
    }
    let (vocab, packed, trained) = corpus_and_vocab(&r.corpus, rc.vocab.as_deref(), r.vocab_size, r.max_len, overlong(r.split_long))?;
    let config = model_config(&r, vocab.size());
    config.validate()?;

    prepare_out(&r.out)?;
    let vocab_file = if trained {
        let p = r.out.join("vocab.txt");
        vocab.save(&p)?;
        p
    } else {
        rc.vocab.clone().expect("vocabulary path given")
    };
    let resolved = RunConfig {
        objective: Some(r.objective),
        preset: Some(r.preset.name().into()),
        corpus: Some(r.corpus.clone()),
        vocab: Some(vocab_file),
        out: Some(r.out.clone()),
        resume: rc.resume.clone(),
        vocab_size: Some(vocab.size()),
        max_len: Some(r.max_len),
        split_long: Some(r.split_long),
        workers: Some(r.workers),
        deterministic: Some(r.deterministic),
        model: ModelOverrides {
            layers: Some(config.layers),
            heads: Some(config.heads),
            d_hidden: Some(config.d_hidden),
            d_ff: Some(config.d_ff),
            dropout: Some(config.dropout),
        },
        train: TrainOverrides {
            peak_lr: Some(r.train.resolved_peak_lr(r.objective, LrTable::for_preset(r.preset))),
            lr_multiplier: Some(r.train.lr_multiplier),
            warmup_steps: Some(r.train.warmup_steps),
            max_steps: Some(r.train.max_steps),
            weight_decay: Some(r.train.weight_decay),
            adam_beta1: Some(r.train.adam_beta1),
            adam_beta2: Some(r.train.adam_beta2),
            adam_eps: Some(r.train.adam_eps),
            batch_size: Some(r.train.batch_size),
            seed: Some(r.train.seed),
            checkpoint_every_steps: Some(r.train.checkpoint_every_steps),
            grad_clip: r.train.grad_clip,
            rate: Some(r.train.corruption.rate),
            shuffle_rate: Some(r.train.corruption.shuffle_rate),
            random_rate: Some(r.train.corruption.random_rate),
            allow_fixed_points: Some(r.train.corruption.allow_fixed_points),
        },
    };
    std::fs::write(r.out.join("config.toml"), resolved.to_toml())?;

    let state = match &rc.resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            if ck.config != config {
                return Err(CliError::new("mismatch", "checkpoint model config differs from the run config"));
            }
            if ck.vocab_fingerprint != vocab.fingerprint() {
                return Err(CliError::new("mismatch", "checkpoint was trained with a different vocabulary"));
            }
            if ck.seed != r.train.seed || ck.objective != Some(r.objective) {
                return Err(CliError::new("mismatch", "checkpoint seed or objective differs from the run config"));
            }
            TrainState::from_checkpoint(ck)?
        }
        None => TrainState::new(config, r.objective, r.train.seed)?,
    };
    let classes = VocabClasses::new(&vocab);
    let opts = RunOptions {
        out_dir: Some(r.out.clone()),
        deterministic: r.deterministic,
        workers: r.workers,
        vocab_fingerprint: vocab.fingerprint(),
        lr_table: Some(LrTable::for_preset(r.preset)),
    };
    let log_every = a.log_every;
    let report = trainer::pretrain(&packed, &classes, state, &r.train, &opts, |step, loss| {
        if log_every > 0 && step % log_every == 0 {
            eprintln!("step {step:>7}  loss {loss:.4}");
        }
        true
    })?;
    let last = report.losses.last().map_or(f64::NAN, |l| l.1);
    println!(
        "{}: {} steps, final loss {last:.4}, {:.1}s, {:.0} tokens/s",
        r.objective,
        report.losses.len(),
        report.seconds,
        report.tokens as f64 / report.seconds.max(1e-9)
    );
    if let Some(p) = report.checkpoints.last() {
        println!("checkpoint {}", p.display());
    }
    Ok(())
}

fn inspect_batch(a: InspectArgs) -> Result<()> {
    let objective = ObjectiveKind::from_name(&a.objective)?;
    let (vocab, packed, _) = corpus_and_vocab(&a.corpus, a.vocab.as_deref(), a.vocab_size, a.max_len, overlong(a.split_long))?;
    if a.batch_size == 0 {
        return Err(CliError::config("batch size must be positive"));
    }
    let classes = VocabClasses::new(&vocab);
    let mut corruption = CorruptionConfig::default();
    if let Some(rate) = a.rate {
        corruption.rate = rate;
    }
    let source = trainer::BatchSource {
        corpus: &packed,
        classes: &classes,
        objective,
        corruption,
        batch_size: a.batch_size,
        seed: a.seed,
    };
    let (epoch, bi, idx) = trainer::batch_plan(packed.len(), a.batch_size, a.seed, a.step);
    let batch = source.batch(a.step)?;
    let mut text = format!("objective {objective}, step {}, epoch {epoch}, batch {bi}\n", a.step);
    for (r, &i) in idx.iter().enumerate().take(a.rows) {
        text.push_str(&format!("\nrow {r} (sequence {i})\n"));
        text.push_str(&objectives::render_row(&vocab, objective, &packed.sequences[i], &batch.row(r)));
    }
    print!("{text}");
    if let Some(out) = &a.out {
        prepare_out(out)?;
        write_args(out, &a)?;
        std::fs::write(out.join("batch.txt"), &text)?;
        if a.export {
            let rows = (0..batch.batch_size)
                .map(|r| {
                    let mut row = batch.row(r);
                    let n = packed.sequences[idx[r]].real_len;
                    row.input_ids.truncate(n);
                    row.labels.truncate(n);
                    row.loss_mask.truncate(n);
                    row
                })
                .collect();
            let shard = Shard { objective, max_len: packed.max_len, vocab_fingerprint: vocab.fingerprint(), rows };
            shard.save(&out.join("batch.shard"))?;
        }
    }
    Ok(())
}

fn probe_setup(p: &ProbeOpts) -> Result<(ProbeTask, Vec<u64>, FinetuneConfig)> {
    let task = if p.task == "synthetic" {
        probe::generate_synthetic_task(&SyntheticGrammar::default(), p.n_train, p.n_dev, p.seed)?
    } else {
        let path = Path::new(&p.task);
        require_file(path, "task file")?;
        ProbeTask::load(path, p.dev_per_class, p.seed)?
    };
    if p.seeds == 0 {
        return Err(CliError::config("--seeds must be positive"));
    }
    let seeds = (0..p.seeds as u64).map(|i| rng::derive_seed(p.seed, Domain::Finetune, &[0xF1, i])).collect();
    let cfg = FinetuneConfig {
        epochs_max: p.epochs_max,
        batch_size: p.batch_size,
        lr: p.lr,
        lr_multiplier: p.lr_multiplier,
        workers: p.workers,
        ..FinetuneConfig::default()
    };
    Ok((task, seeds, cfg))
}

fn finetune(a: FinetuneArgs) -> Result<()> {
    require_file(&a.checkpoint, "checkpoint")?;
    let vocab_path = match &a.vocab {
        Some(v) => v.clone(),
        None => a
            .checkpoint
            .parent()
            .and_then(Path::parent)
            .map(|d| d.join("vocab.txt"))
            .ok_or_else(|| CliError::config("cannot locate vocab.txt; pass --vocab"))?,
    };
    require_file(&vocab_path, "vocabulary")?;
    let vocab = Vocab::load(&vocab_path)?;
    let mut ck = Checkpoint::load(&a.checkpoint)?;
    if a.random_init {
        ck = probe::random_init_checkpoint(&ck.config, ck.seed, ck.vocab_fingerprint)?;
    }
    let (task, seeds, cfg) = probe_setup(&a.probe)?;
    let report = probe::finetune(&ck, &vocab, &task, &seeds, &cfg)?;
    prepare_out(&a.out)?;
    write_args(&a.out, &a)?;
    std::fs::write(a.out.join("task.tsv"), task.to_tsv())?;
    let mut csv = String::from("seed,initial_accuracy,best_accuracy,best_step,steps_run,step_budget\n");
    for r in &report.runs {
        csv.push_str(&format!(
            "{},{:.4},{:.4},{},{},{}\n",
            r.seed, r.initial_accuracy, r.best_accuracy, r.best_step, r.steps_run, r.step_budget
        ));
    }
    std::fs::write(a.out.join("finetune.csv"), csv)?;
    let summary = format!("{}: dev accuracy {:.4} ± {:.4} over {} seeds\n", task.name, report.mean, report.std, seeds.len());
    std::fs::write(a.out.join("summary.txt"), &summary)?;
    print!("{summary}");
    Ok(())
}

/// `.ckpt` files directly in `dir` (named by objective) and run
/// directories holding `checkpoints/` (named by directory, latest step).
fn collect_checkpoints(dir: &Path) -> Result<Vec<(String, Checkpoint)>> {
    if !dir.is_dir() {
        return Err(CliError::config(format!("checkpoint directory not found: {}", dir.display())));
    }
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
    entries.sort();
    let mut out = Vec::new();
    for p in entries {
        if p.extension().is_some_and(|e| e == "ckpt") {
            let ck = Checkpoint::load(&p)?;
            let name = match ck.objective {
                Some(k) => k.name().to_string(),
                None => p.file_stem().map_or_else(|| "checkpoint".into(), |s| s.to_string_lossy().into_owned()),
            };
            out.push((name, ck));
        } else if p.join("checkpoints").is_dir() {
            let mut cks: Vec<PathBuf> = std::fs::read_dir(p.join("checkpoints"))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|q| q.extension().is_some_and(|e| e == "ckpt"))
                .collect();
            cks.sort();
            if let Some(last) = cks.last() {
                let name = p.file_name().map_or_else(|| "run".into(), |s| s.to_string_lossy().into_owned());
                out.push((name, Checkpoint::load(last)?));
            }
        }
    }
    if out.is_empty() {
        return Err(CliError::config(format!("no checkpoints under {}", dir.display())));
    }
    Ok(out)
}

fn compare(a: CompareArgs) -> Result<()> {
    require_file(&a.vocab, "vocabulary")?;
    let vocab = Vocab::load(&a.vocab)?;
    let mut cks = collect_checkpoints(&a.checkpoints)?;
    if a.include_random_init {
        let c = &cks[0].1;
        let base = probe::random_init_checkpoint(&c.config, c.seed, c.vocab_fingerprint)?;
        cks.push(("random_init".into(), base));
    }
    let (task, seeds, cfg) = probe_setup(&a.probe)?;
    let rows = probe::compare_objectives(&cks, &vocab, &task, &seeds, &cfg)?;
    prepare_out(&a.out)?;
    write_args(&a.out, &a)?;
    std::fs::write(a.out.join("task.tsv"), task.to_tsv())?;
    std::fs::write(a.out.join("ranking.csv"), probe::ranking_csv(&rows))?;
    let text = probe::ranking_text(&rows);
    std::fs::write(a.out.join("ranking.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn plot_cmd(a: PlotArgs) -> Result<()> {
    if !a.labels.is_empty() && a.labels.len() != a.metrics.len() {
        return Err(CliError::config("--labels must name every metrics file"));
    }
    let mut series = Vec::new();
    for (i, m) in a.metrics.iter().enumerate() {
        require_file(m, "metrics file")?;
        let rows = plot::read_metrics(m)?;
        let name = a.labels.get(i).cloned().unwrap_or_else(|| {
            m.parent()
                .and_then(Path::file_name)
                .map_or_else(|| format!("run {i}"), |s| s.to_string_lossy().into_owned())
        });
        series.push((name, rows));
    }
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        prepare_out(parent)?;
    }
    std::fs::write(&a.out, plot::render_svg(&series, a.smooth))?;
    println!("wrote {}", a.out.display());
    Ok(())
}
