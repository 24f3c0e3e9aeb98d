//! Dynamic corruption and label generation for every pretraining objective.
//!
//! Detection objectives (Shuffle, Random, Shuffle+Random) label every
//! eligible token and score all of them. Masked objectives (MLM, Token Type,
//! First Char, masked stop-word detection) replace the selected tokens and
//! score only those. Eligible positions are real tokens other than CLS, SEP
//! and PAD.

pub mod shard;
pub mod taxonomy;

use std::fmt::Write as _;

use rand::seq::index;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::TokenSequence;
use crate::rng::{self, Domain, StreamRng};
use crate::tokenizer::{is_special, Vocab, MASK, NUM_SPECIAL};
pub use taxonomy::{classify_first_char, classify_type, TokenType, VocabClasses};

pub const DEFAULT_RATE: f64 = 0.15;
pub const DEFAULT_PAIR_RATE: f64 = 0.10;
const MAX_REDRAWS: usize = 16;
const SHUFFLE_TRIES: usize = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObjectiveError {
    #[error("sequence has no eligible tokens")]
    NoEligibleTokens,
    #[error("need at least {needed} eligible tokens, found {found}")]
    TooFewEligible { needed: usize, found: usize },
    #[error("vocabulary of {vocab_size} has fewer than two non-special ids")]
    VocabTooSmall { vocab_size: usize },
    #[error("no distinct replacement for id {original} after {MAX_REDRAWS} redraws")]
    RedrawExhausted { original: u32 },
    #[error("rate {0} must lie strictly between 0 and 1")]
    InvalidRate(f64),
    #[error("class tables cover {tables} ids but sequence uses id {id}")]
    IdOutOfRange { id: u32, tables: usize },
    #[error("unknown objective {0:?}")]
    UnknownObjective(String),
    #[error("empty batch")]
    EmptyBatch,
}

pub type Result<T> = std::result::Result<T, ObjectiveError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    Mlm,
    Shuffle,
    Random,
    ShuffleRandom,
    TokenType,
    FirstChar,
    #[serde(rename = "masked_stopword")]
    MaskedStopWord,
}

impl ObjectiveKind {
    pub const ALL: [ObjectiveKind; 7] = [
        ObjectiveKind::Mlm,
        ObjectiveKind::Shuffle,
        ObjectiveKind::Random,
        ObjectiveKind::ShuffleRandom,
        ObjectiveKind::TokenType,
        ObjectiveKind::FirstChar,
        ObjectiveKind::MaskedStopWord,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ObjectiveKind::Mlm => "mlm",
            ObjectiveKind::Shuffle => "shuffle",
            ObjectiveKind::Random => "random",
            ObjectiveKind::ShuffleRandom => "shuffle_random",
            ObjectiveKind::TokenType => "token_type",
            ObjectiveKind::FirstChar => "first_char",
            ObjectiveKind::MaskedStopWord => "masked_stopword",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name).ok_or_else(|| ObjectiveError::UnknownObjective(name.into()))
    }

    pub fn tag(self) -> u8 {
        Self::ALL.iter().position(|&k| k == self).expect("listed") as u8 + 1
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.get((tag as usize).checked_sub(1)?).copied()
    }

    pub fn num_classes(self, vocab_size: usize) -> usize {
        match self {
            ObjectiveKind::Mlm => vocab_size,
            ObjectiveKind::Shuffle | ObjectiveKind::Random | ObjectiveKind::MaskedStopWord => 2,
            ObjectiveKind::ShuffleRandom => 3,
            ObjectiveKind::TokenType => taxonomy::NUM_TYPE_CLASSES,
            ObjectiveKind::FirstChar => taxonomy::NUM_FIRST_CHAR_CLASSES,
        }
    }

    /// Whether the loss covers every eligible token rather than only the
    /// corrupted ones.
    pub fn scores_all_tokens(self) -> bool {
        matches!(self, ObjectiveKind::Shuffle | ObjectiveKind::Random | ObjectiveKind::ShuffleRandom)
    }

    pub fn label_name(self, label: u32) -> String {
        match self {
            ObjectiveKind::Shuffle | ObjectiveKind::Random | ObjectiveKind::ShuffleRandom => {
                ["orig", "shuf", "rand"].get(label as usize).map_or(label.to_string(), |s| s.to_string())
            }
            ObjectiveKind::MaskedStopWord => if label == 1 { "stop" } else { "other" }.to_string(),
            ObjectiveKind::TokenType => ["stop", "digit", "punct", "content"]
                .get(label as usize)
                .map_or(label.to_string(), |s| s.to_string()),
            ObjectiveKind::FirstChar => match label {
                0..=25 => ((b'a' + label as u8) as char).to_string(),
                26 => "digit".into(),
                27 => "punct".into(),
                _ => "other".into(),
            },
            ObjectiveKind::Mlm => format!("#{label}"),
        }
    }
}

impl std::fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Corruption rates and switches for one objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionConfig {
    #[serde(default = "default_rate")]
    pub rate: f64,
    #[serde(default = "default_pair_rate")]
    pub shuffle_rate: f64,
    #[serde(default = "default_pair_rate")]
    pub random_rate: f64,
    /// Allow shuffled tokens to keep their original value. Off by default:
    /// such tokens carry the "shuffled" label while looking untouched.
    #[serde(default)]
    pub allow_fixed_points: bool,
}

fn default_rate() -> f64 {
    DEFAULT_RATE
}

fn default_pair_rate() -> f64 {
    DEFAULT_PAIR_RATE
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        Self { rate: DEFAULT_RATE, shuffle_rate: DEFAULT_PAIR_RATE, random_rate: DEFAULT_PAIR_RATE, allow_fixed_points: false }
    }
}

/// One corrupted sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorruptedRow {
    pub input_ids: Vec<u32>,
    pub labels: Vec<u32>,
    pub loss_mask: Vec<u8>,
}

impl CorruptedRow {
    fn from_seq(seq: &TokenSequence) -> Self {
        let n = seq.ids.len();
        Self { input_ids: seq.ids.clone(), labels: vec![0; n], loss_mask: vec![0; n] }
    }
}

/// Row-major `[batch, max_len]` corrupted inputs with labels and masks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledBatch {
    pub objective: ObjectiveKind,
    pub batch_size: usize,
    pub max_len: usize,
    pub input_ids: Vec<u32>,
    pub labels: Vec<u32>,
    pub loss_mask: Vec<u8>,
    pub attention_mask: Vec<u8>,
}

impl LabeledBatch {
    pub fn from_rows(objective: ObjectiveKind, rows: &[CorruptedRow], attention: &[&[u8]]) -> Result<Self> {
        let max_len = rows.first().ok_or(ObjectiveError::EmptyBatch)?.input_ids.len();
        let mut b = Self {
            objective,
            batch_size: rows.len(),
            max_len,
            input_ids: Vec::with_capacity(rows.len() * max_len),
            labels: Vec::with_capacity(rows.len() * max_len),
            loss_mask: Vec::with_capacity(rows.len() * max_len),
            attention_mask: Vec::with_capacity(rows.len() * max_len),
        };
        for (r, a) in rows.iter().zip(attention) {
            b.input_ids.extend_from_slice(&r.input_ids);
            b.labels.extend_from_slice(&r.labels);
            b.loss_mask.extend_from_slice(&r.loss_mask);
            b.attention_mask.extend_from_slice(a);
        }
        Ok(b)
    }

    pub fn row(&self, i: usize) -> CorruptedRow {
        let r = i * self.max_len..(i + 1) * self.max_len;
        CorruptedRow {
            input_ids: self.input_ids[r.clone()].to_vec(),
            labels: self.labels[r.clone()].to_vec(),
            loss_mask: self.loss_mask[r].to_vec(),
        }
    }

    pub fn scored_tokens(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m != 0).count()
    }

    pub fn real_tokens(&self) -> usize {
        self.attention_mask.iter().filter(|&&m| m != 0).count()
    }

    /// FNV-1a over inputs, labels and masks; identifies a batch in
    /// diagnostics.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |b: u8| {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        };
        for &v in self.input_ids.iter().chain(&self.labels) {
            v.to_le_bytes().into_iter().for_each(&mut eat);
        }
        for &m in self.loss_mask.iter().chain(&self.attention_mask) {
            eat(m);
        }
        h
    }
}

/// Positions a corruption may select.
pub fn eligible_positions(seq: &TokenSequence) -> Vec<usize> {
    (0..seq.real_len).filter(|&i| seq.attention_mask[i] != 0 && !is_special(seq.ids[i])).collect()
}

/// Number of tokens to corrupt: `rate * eligible` rounded half up, at least
/// one. The small offset absorbs binary representation error in `rate`.
pub fn corruption_count(rate: f64, eligible: usize) -> usize {
    if eligible == 0 {
        return 0;
    }
    (((rate * eligible as f64) + 0.5 + 1e-9).floor() as usize).clamp(1, eligible)
}

fn check_rate(rate: f64) -> Result<()> {
    if rate > 0.0 && rate < 1.0 {
        Ok(())
    } else {
        Err(ObjectiveError::InvalidRate(rate))
    }
}

fn select<R: Rng + ?Sized>(rng: &mut R, eligible: &[usize], k: usize) -> Vec<usize> {
    index::sample(rng, eligible.len(), k).into_iter().map(|i| eligible[i]).collect()
}

fn check_vocab(vocab_size: usize) -> Result<()> {
    if vocab_size < NUM_SPECIAL as usize + 2 {
        Err(ObjectiveError::VocabTooSmall { vocab_size })
    } else {
        Ok(())
    }
}

fn random_id<R: Rng + ?Sized>(rng: &mut R, vocab_size: usize) -> u32 {
    rng.random_range(NUM_SPECIAL..vocab_size as u32)
}

fn distinct_random_id<R: Rng + ?Sized>(rng: &mut R, vocab_size: usize, original: u32) -> Result<u32> {
    for _ in 0..=MAX_REDRAWS {
        let id = random_id(rng, vocab_size);
        if id != original {
            return Ok(id);
        }
    }
    Err(ObjectiveError::RedrawExhausted { original })
}

/// Permutes `values` in place. Unless `allow_fixed_points`, the result
/// changes the value at every slot whenever that is possible: uniform
/// shuffles are retried, then a rotation of the value-sorted order by the
/// largest multiplicity is used.
fn shuffle_values<R: Rng + ?Sized>(rng: &mut R, values: &mut [u32], allow_fixed_points: bool) {
    if values.len() < 2 {
        return;
    }
    let original = values.to_vec();
    values.shuffle(rng);
    if allow_fixed_points {
        return;
    }
    for _ in 0..SHUFFLE_TRIES {
        if values.iter().zip(&original).all(|(a, b)| a != b) {
            return;
        }
        values.shuffle(rng);
    }
    let n = original.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.sort_by_key(|&i| original[i]);
    let mut max_run = 1;
    let mut run = 1;
    for w in order.windows(2) {
        run = if original[w[0]] == original[w[1]] { run + 1 } else { 1 };
        max_run = max_run.max(run);
    }
    let shift = max_run % n;
    for (j, &slot) in order.iter().enumerate() {
        values[slot] = original[order[(j + shift) % n]];
    }
}

fn corrupt_shuffle_positions<R: Rng + ?Sized>(
    rng: &mut R,
    row: &mut CorruptedRow,
    positions: &[usize],
    allow_fixed_points: bool,
) {
    let mut vals: Vec<u32> = positions.iter().map(|&p| row.input_ids[p]).collect();
    shuffle_values(rng, &mut vals, allow_fixed_points);
    for (&p, v) in positions.iter().zip(vals) {
        row.input_ids[p] = v;
    }
}

fn score_all(row: &mut CorruptedRow, eligible: &[usize]) {
    for &p in eligible {
        row.loss_mask[p] = 1;
    }
}

/// Shuffles `round(rate * eligible)` selected tokens among their positions;
/// label 1 there, 0 at the other eligible positions.
pub fn corrupt_shuffle<R: Rng + ?Sized>(
    seq: &TokenSequence,
    rate: f64,
    allow_fixed_points: bool,
    rng: &mut R,
) -> Result<CorruptedRow> {
    check_rate(rate)?;
    let eligible = eligible_positions(seq);
    if eligible.is_empty() {
        return Err(ObjectiveError::NoEligibleTokens);
    }
    let sel = select(rng, &eligible, corruption_count(rate, eligible.len()));
    let mut row = CorruptedRow::from_seq(seq);
    corrupt_shuffle_positions(rng, &mut row, &sel, allow_fixed_points);
    score_all(&mut row, &eligible);
    for &p in &sel {
        row.labels[p] = 1;
    }
    Ok(row)
}

/// Replaces selected tokens with a different uniformly drawn non-special id.
pub fn corrupt_random<R: Rng + ?Sized>(
    seq: &TokenSequence,
    rate: f64,
    vocab_size: usize,
    rng: &mut R,
) -> Result<CorruptedRow> {
    check_rate(rate)?;
    check_vocab(vocab_size)?;
    let eligible = eligible_positions(seq);
    if eligible.is_empty() {
        return Err(ObjectiveError::NoEligibleTokens);
    }
    let sel = select(rng, &eligible, corruption_count(rate, eligible.len()));
    let mut row = CorruptedRow::from_seq(seq);
    score_all(&mut row, &eligible);
    for &p in &sel {
        row.input_ids[p] = distinct_random_id(rng, vocab_size, seq.ids[p])?;
        row.labels[p] = 1;
    }
    Ok(row)
}

/// Two disjoint selections: one shuffled among itself (label 1), one
/// replaced with random ids (label 2).
pub fn corrupt_shuffle_random<R: Rng + ?Sized>(
    seq: &TokenSequence,
    shuffle_rate: f64,
    random_rate: f64,
    vocab_size: usize,
    allow_fixed_points: bool,
    rng: &mut R,
) -> Result<CorruptedRow> {
    check_rate(shuffle_rate)?;
    check_rate(random_rate)?;
    check_vocab(vocab_size)?;
    let eligible = eligible_positions(seq);
    let n = eligible.len();
    let ks = corruption_count(shuffle_rate, n);
    let kr = corruption_count(random_rate, n);
    if n < 2 || ks + kr > n {
        return Err(ObjectiveError::TooFewEligible { needed: (ks + kr).max(2), found: n });
    }
    let sel = select(rng, &eligible, ks + kr);
    let (shuf, rand) = sel.split_at(ks);
    let mut row = CorruptedRow::from_seq(seq);
    score_all(&mut row, &eligible);
    corrupt_shuffle_positions(rng, &mut row, shuf, allow_fixed_points);
    for &p in shuf {
        row.labels[p] = 1;
    }
    for &p in rand {
        row.input_ids[p] = distinct_random_id(rng, vocab_size, seq.ids[p])?;
        row.labels[p] = 2;
    }
    Ok(row)
}

fn corrupt_masked_class<R: Rng + ?Sized>(
    seq: &TokenSequence,
    rate: f64,
    table: &[u8],
    rng: &mut R,
) -> Result<CorruptedRow> {
    check_rate(rate)?;
    let eligible = eligible_positions(seq);
    if eligible.is_empty() {
        return Err(ObjectiveError::NoEligibleTokens);
    }
    let sel = select(rng, &eligible, corruption_count(rate, eligible.len()));
    let mut row = CorruptedRow::from_seq(seq);
    for &p in &sel {
        let id = seq.ids[p];
        let class = *table.get(id as usize).ok_or(ObjectiveError::IdOutOfRange { id, tables: table.len() })?;
        row.input_ids[p] = MASK;
        row.labels[p] = class as u32;
        row.loss_mask[p] = 1;
    }
    Ok(row)
}

/// Masks selected tokens; labels are the 4-way type of the original token.
pub fn corrupt_mask_tokentype<R: Rng + ?Sized>(
    seq: &TokenSequence,
    rate: f64,
    classes: &VocabClasses,
    rng: &mut R,
) -> Result<CorruptedRow> {
    corrupt_masked_class(seq, rate, &classes.token_type, rng)
}

/// Masks selected tokens; labels are the 29-way first-character class.
pub fn corrupt_mask_firstchar<R: Rng + ?Sized>(
    seq: &TokenSequence,
    rate: f64,
    classes: &VocabClasses,
    rng: &mut R,
) -> Result<CorruptedRow> {
    corrupt_masked_class(seq, rate, &classes.first_char, rng)
}

/// Masks selected tokens; label 1 iff the original is a stop word.
pub fn corrupt_mask_stopword<R: Rng + ?Sized>(
    seq: &TokenSequence,
    rate: f64,
    classes: &VocabClasses,
    rng: &mut R,
) -> Result<CorruptedRow> {
    corrupt_masked_class(seq, rate, &classes.stop_word, rng)
}

/// Bucket sizes for MLM: (mask, random, keep). Random and keep each get
/// `floor(k / 10)`, mask gets the rest.
pub fn mlm_buckets(k: usize) -> (usize, usize, usize) {
    let r = k / 10;
    (k - 2 * r, r, r)
}

/// BERT-style masking: selected tokens become MASK, a random id, or stay;
/// labels are the original ids.
pub fn corrupt_mlm<R: Rng + ?Sized>(
    seq: &TokenSequence,
    rate: f64,
    vocab_size: usize,
    rng: &mut R,
) -> Result<CorruptedRow> {
    check_rate(rate)?;
    check_vocab(vocab_size)?;
    let eligible = eligible_positions(seq);
    if eligible.is_empty() {
        return Err(ObjectiveError::NoEligibleTokens);
    }
    let sel = select(rng, &eligible, corruption_count(rate, eligible.len()));
    let (n_mask, n_random, _) = mlm_buckets(sel.len());
    let mut row = CorruptedRow::from_seq(seq);
    for (j, &p) in sel.iter().enumerate() {
        if j < n_mask {
            row.input_ids[p] = MASK;
        } else if j < n_mask + n_random {
            row.input_ids[p] = random_id(rng, vocab_size);
        }
        row.labels[p] = seq.ids[p];
        row.loss_mask[p] = 1;
    }
    Ok(row)
}

/// Applies `objective` to one sequence.
pub fn corrupt<R: Rng + ?Sized>(
    objective: ObjectiveKind,
    config: &CorruptionConfig,
    classes: &VocabClasses,
    seq: &TokenSequence,
    rng: &mut R,
) -> Result<CorruptedRow> {
    let v = classes.vocab_size;
    match objective {
        ObjectiveKind::Mlm => corrupt_mlm(seq, config.rate, v, rng),
        ObjectiveKind::Shuffle => corrupt_shuffle(seq, config.rate, config.allow_fixed_points, rng),
        ObjectiveKind::Random => corrupt_random(seq, config.rate, v, rng),
        ObjectiveKind::ShuffleRandom => {
            corrupt_shuffle_random(seq, config.shuffle_rate, config.random_rate, v, config.allow_fixed_points, rng)
        }
        ObjectiveKind::TokenType => corrupt_mask_tokentype(seq, config.rate, classes, rng),
        ObjectiveKind::FirstChar => corrupt_mask_firstchar(seq, config.rate, classes, rng),
        ObjectiveKind::MaskedStopWord => corrupt_mask_stopword(seq, config.rate, classes, rng),
    }
}

/// Substream for one row of one batch of one epoch.
pub fn row_stream(seed: u64, epoch: u64, batch_index: u64, row: u64) -> StreamRng {
    rng::stream(seed, Domain::Corruption, &[epoch, batch_index, row])
}

/// Corrupts every row with its own substream, so a batch is a pure
/// function of `(seed, epoch, batch_index)` and the sequences.
pub fn make_batch(
    objective: ObjectiveKind,
    config: &CorruptionConfig,
    classes: &VocabClasses,
    sequences: &[&TokenSequence],
    seed: u64,
    epoch: u64,
    batch_index: u64,
) -> Result<LabeledBatch> {
    let rows = sequences
        .iter()
        .enumerate()
        .map(|(r, s)| corrupt(objective, config, classes, s, &mut row_stream(seed, epoch, batch_index, r as u64)))
        .collect::<Result<Vec<_>>>()?;
    let attention: Vec<&[u8]> = sequences.iter().map(|s| s.attention_mask.as_slice()).collect();
    LabeledBatch::from_rows(objective, &rows, &attention)
}

/// Column view of one row: position, original token, corrupted token,
/// label and whether it is scored.
pub fn render_row(vocab: &Vocab, objective: ObjectiveKind, seq: &TokenSequence, row: &CorruptedRow) -> String {
    let tok = |id: u32| vocab.token(id).map_or_else(|| format!("<{id}>"), |t| t.to_string());
    let mut out = String::new();
    let _ = writeln!(out, "{:>4}  {:<18} {:<18} {:>8}  scored", "pos", "original", "input", "label");
    for i in 0..seq.real_len {
        let changed = if row.input_ids[i] != seq.ids[i] { "*" } else { " " };
        let label = if row.loss_mask[i] != 0 { objective.label_name(row.labels[i]) } else { "-".into() };
        let label = if objective == ObjectiveKind::Mlm && row.loss_mask[i] != 0 { tok(row.labels[i]) } else { label };
        let _ = writeln!(
            out,
            "{i:>4}  {:<18} {changed}{:<17} {label:>8}  {}",
            tok(seq.ids[i]),
            tok(row.input_ids[i]),
            row.loss_mask[i]
        );
    }
    out
}
