//! Fine-tuning probes: small sequence-classification tasks used to compare
//! pretrained encoders by transfer accuracy.

mod finetune;

pub use finetune::{
    compare_objectives, finetune, random_init_checkpoint, ranking_csv, ranking_text, FinetuneConfig, FinetuneReport,
    RankRow, SeedResult,
};

use std::collections::{BTreeSet, HashSet};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use thiserror::Error;

use crate::corpus::synth::{capitalize, LEXICON};
use crate::model::{CheckpointError, ModelError};
use crate::rng::{self, Domain};

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("checkpoint does not fit the task: {0}")]
    Mismatch(String),
    #[error("invalid probe task: {0}")]
    Task(String),
    #[error("invalid fine-tuning config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<crate::autodiff::AutodiffError> for ProbeError {
    fn from(e: crate::autodiff::AutodiffError) -> Self {
        ProbeError::Model(e.into())
    }
}

pub type Result<T> = std::result::Result<T, ProbeError>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub text: String,
    pub label: usize,
}

/// Labeled sentences split into disjoint train and dev sets. The dev set
/// holds the same number of examples for every class.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeTask {
    pub name: String,
    /// Class names; `Example::label` indexes this list.
    pub labels: Vec<String>,
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub split_seed: u64,
}

impl ProbeTask {
    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    /// Stratified split: every class contributes `dev_per_class` examples
    /// to dev and the rest to train.
    pub fn split(name: &str, labels: Vec<String>, examples: Vec<Example>, dev_per_class: usize, seed: u64) -> Result<Self> {
        if labels.len() < 2 {
            return Err(ProbeError::Task(format!("need at least 2 classes, found {}", labels.len())));
        }
        let mut seen = HashSet::new();
        let mut by_class: Vec<Vec<Example>> = vec![Vec::new(); labels.len()];
        for ex in examples {
            if ex.label >= labels.len() {
                return Err(ProbeError::Task(format!("label {} out of range", ex.label)));
            }
            if !seen.insert(ex.text.clone()) {
                return Err(ProbeError::Task(format!("duplicate example {:?}", ex.text)));
            }
            by_class[ex.label].push(ex);
        }
        let (mut train, mut dev) = (Vec::new(), Vec::new());
        for (c, mut group) in by_class.into_iter().enumerate() {
            if group.len() <= dev_per_class {
                return Err(ProbeError::Task(format!(
                    "class {:?} has {} examples, need more than {dev_per_class}",
                    labels[c],
                    group.len()
                )));
            }
            group.shuffle(&mut rng::stream(seed, Domain::Split, &[c as u64]));
            let rest = group.split_off(dev_per_class);
            dev.extend(group);
            train.extend(rest);
        }
        Ok(Self { name: name.to_string(), labels, train, dev, split_seed: seed })
    }

    /// Reads `text<TAB>label` lines. Class ids follow the sorted label names.
    pub fn from_tsv(name: &str, tsv: &str, dev_per_class: usize, seed: u64) -> Result<Self> {
        let mut rows = Vec::new();
        for (n, line) in tsv.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (text, label) =
                line.rsplit_once('\t').ok_or_else(|| ProbeError::Task(format!("line {}: missing tab", n + 1)))?;
            if text.trim().is_empty() || label.trim().is_empty() {
                return Err(ProbeError::Task(format!("line {}: empty text or label", n + 1)));
            }
            rows.push((text.to_string(), label.trim().to_string()));
        }
        let labels: Vec<String> = rows.iter().map(|r| r.1.clone()).collect::<BTreeSet<_>>().into_iter().collect();
        let examples = rows
            .into_iter()
            .map(|(text, l)| Example { text, label: labels.binary_search(&l).expect("label collected above") })
            .collect();
        Self::split(name, labels, examples, dev_per_class, seed)
    }

    pub fn load(path: &Path, dev_per_class: usize, seed: u64) -> Result<Self> {
        let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "task".into());
        Self::from_tsv(&name, &std::fs::read_to_string(path)?, dev_per_class, seed)
    }

    /// Train rows then dev rows as `text<TAB>label`.
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for ex in self.train.iter().chain(&self.dev) {
            s.push_str(&ex.text);
            s.push('\t');
            s.push_str(&self.labels[ex.label]);
            s.push('\n');
        }
        s
    }

    pub fn dev_per_class(&self) -> usize {
        self.dev.len() / self.num_classes()
    }
}

/// Word categories a template slot can draw from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Slot {
    Det,
    Adj,
    Noun,
    Verb,
}

impl Slot {
    fn words(self) -> &'static [&'static str] {
        match self {
            Slot::Det => LEXICON.determiners,
            Slot::Adj => LEXICON.adjectives,
            Slot::Noun => LEXICON.nouns,
            Slot::Verb => LEXICON.verbs,
        }
    }
}

/// Word-order templates over the synthetic corpus lexicon, one class per
/// template. All templates use the same multiset of slots, so only the order
/// of words separates the classes.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticGrammar {
    pub templates: Vec<(String, Vec<Slot>)>,
}

impl Default for SyntheticGrammar {
    /// Four classes given by the adjective/noun order inside each of the
    /// two noun phrases around the verb.
    fn default() -> Self {
        use Slot::*;
        let np = |adj_first: bool| if adj_first { [Det, Adj, Noun] } else { [Det, Noun, Adj] };
        let templates = [(true, true), (true, false), (false, true), (false, false)]
            .iter()
            .map(|&(a, b)| {
                let name = format!("{}-{}", if a { "an" } else { "na" }, if b { "an" } else { "na" });
                let mut t = np(a).to_vec();
                t.push(Verb);
                t.extend(np(b));
                (name, t)
            })
            .collect();
        Self { templates }
    }
}

impl SyntheticGrammar {
    pub fn validate(&self) -> Result<()> {
        if self.templates.len() < 2 {
            return Err(ProbeError::Task("grammar needs at least 2 templates".into()));
        }
        let bag = |t: &[Slot]| {
            let mut counts = [0usize; 4];
            t.iter().for_each(|&s| counts[s as usize] += 1);
            counts
        };
        let first = bag(&self.templates[0].1);
        let mut orders = HashSet::new();
        for (name, t) in &self.templates {
            if bag(t) != first {
                return Err(ProbeError::Task(format!("template {name} uses a different slot multiset")));
            }
            if !orders.insert(t.clone()) {
                return Err(ProbeError::Task(format!("template {name} repeats another template")));
            }
        }
        Ok(())
    }

    pub fn sentence<R: Rng + ?Sized>(&self, class: usize, rng: &mut R) -> String {
        let words: Vec<&str> = self.templates[class].1.iter().map(|s| *s.words().choose(rng).expect("nonempty")).collect();
        format!("{}.", capitalize(&words.join(" ")))
    }
}

/// Class-balanced task with `n_train` and `n_dev` examples (each rounded
/// down to a multiple of the class count). Sentences are unique across
/// the whole task.
pub fn generate_synthetic_task(grammar: &SyntheticGrammar, n_train: usize, n_dev: usize, seed: u64) -> Result<ProbeTask> {
    grammar.validate()?;
    let k = grammar.templates.len();
    let per_class = (n_train / k) + (n_dev / k);
    let mut rng = rng::stream(seed, Domain::Synthetic, &[0x9e0be]);
    let mut seen = HashSet::new();
    let mut examples = Vec::with_capacity(per_class * k);
    for class in 0..k {
        let mut made = 0;
        let mut tries = 0;
        while made < per_class {
            tries += 1;
            if tries > 100 * per_class + 1000 {
                return Err(ProbeError::Task("grammar cannot produce enough unique sentences".into()));
            }
            let text = grammar.sentence(class, &mut rng);
            if seen.insert(text.clone()) {
                examples.push(Example { text, label: class });
                made += 1;
            }
        }
    }
    let labels = grammar.templates.iter().map(|t| t.0.clone()).collect();
    ProbeTask::split("synthetic-order", labels, examples, n_dev / k, seed)
}
