//! Byte-level byte-pair-encoding vocabulary with reserved special tokens.
//!
//! Ids 0–4 are `[PAD] [CLS] [SEP] [MASK] [UNK]`, ids 5–260 are the 256 raw
//! bytes, and every later id is the product of one merge rule, in merge
//! order. Word-initial tokens carry a leading space byte (rendered `Ġ`),
//! which [`Vocab::token_surface`] strips.

pub mod bytes;
mod train;

pub use train::train_bpe;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

pub const PAD: u32 = 0;
pub const CLS: u32 = 1;
pub const SEP: u32 = 2;
pub const MASK: u32 = 3;
pub const UNK: u32 = 4;
pub const NUM_SPECIAL: u32 = 5;
pub const NUM_BYTES: u32 = 256;
/// Smallest legal vocabulary: specials plus the byte alphabet.
pub const MIN_VOCAB: usize = (NUM_SPECIAL + NUM_BYTES) as usize;
pub const SPECIAL_NAMES: [&str; 5] = ["[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]"];

const FORMAT_MAGIC: &str = "tokenlab-vocab";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("corpus contains no text")]
    EmptyCorpus,
    #[error("target vocabulary size {target} is below the minimum of {MIN_VOCAB}")]
    TargetTooSmall { target: usize },
    #[error("token id {id} out of range for vocabulary of {vocab_size}")]
    IdOutOfRange { id: u32, vocab_size: usize },
    #[error("malformed vocabulary file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TokenizerError>;

pub fn is_special(id: u32) -> bool {
    id < NUM_SPECIAL
}

#[derive(Debug, Clone)]
pub struct Vocab {
    merges: Vec<(u32, u32)>,
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, u32>,
    token_bytes: Vec<Vec<u8>>,
    merge_rank: HashMap<(u32, u32), u32>,
}

impl PartialEq for Vocab {
    fn eq(&self, other: &Self) -> bool {
        self.merges == other.merges && self.id_to_token == other.id_to_token
    }
}

impl Vocab {
    /// Builds the vocabulary implied by an ordered merge list.
    pub fn from_merges(merges: Vec<(u32, u32)>) -> Result<Self> {
        let mut id_to_token: Vec<String> = SPECIAL_NAMES.iter().map(|s| s.to_string()).collect();
        let mut token_bytes: Vec<Vec<u8>> = vec![Vec::new(); NUM_SPECIAL as usize];
        for b in 0..=255u8 {
            id_to_token.push(bytes::bytes_to_token_string(&[b]));
            token_bytes.push(vec![b]);
        }
        let mut merge_rank = HashMap::with_capacity(merges.len());
        for (rank, &(a, b)) in merges.iter().enumerate() {
            let next = id_to_token.len() as u32;
            if is_special(a) || is_special(b) || a >= next || b >= next {
                return Err(TokenizerError::Format(format!("merge {rank} references unknown ids ({a}, {b})")));
            }
            let mut joined = token_bytes[a as usize].clone();
            joined.extend_from_slice(&token_bytes[b as usize]);
            id_to_token.push(format!("{}{}", id_to_token[a as usize], id_to_token[b as usize]));
            token_bytes.push(joined);
            if merge_rank.insert((a, b), rank as u32).is_some() {
                return Err(TokenizerError::Format(format!("duplicate merge ({a}, {b})")));
            }
        }
        let token_to_id: HashMap<String, u32> =
            id_to_token.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        if token_to_id.len() != id_to_token.len() {
            return Err(TokenizerError::Format("merge list produces duplicate tokens".into()));
        }
        Ok(Self { merges, id_to_token, token_to_id, token_bytes, merge_rank })
    }

    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token_bytes(&self, id: u32) -> Option<&[u8]> {
        self.token_bytes.get(id as usize).map(Vec::as_slice)
    }

    /// Encodes one pre-token by repeatedly applying the lowest-ranked merge.
    fn encode_chunk(&self, chunk: &[u8], out: &mut Vec<u32>) {
        let mut syms: Vec<u32> = chunk.iter().map(|&b| b as u32 + NUM_SPECIAL).collect();
        loop {
            let best = syms
                .windows(2)
                .filter_map(|w| self.merge_rank.get(&(w[0], w[1])).map(|&r| (r, (w[0], w[1]))))
                .min();
            let Some((rank, pair)) = best else { break };
            let new_id = NUM_SPECIAL + NUM_BYTES + rank;
            let mut merged = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && (syms[i], syms[i + 1]) == pair {
                    merged.push(new_id);
                    i += 2;
                } else {
                    merged.push(syms[i]);
                    i += 1;
                }
            }
            syms = merged;
        }
        out.extend_from_slice(&syms);
    }

    /// Greedy merge application over UTF-8 bytes. Never emits special ids.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for chunk in bytes::pretokenize(text) {
            self.encode_chunk(chunk.as_bytes(), &mut out);
        }
        out
    }

    /// Encoder that memoises pre-token encodings; use for bulk text.
    pub fn encoder(&self) -> Encoder<'_> {
        Encoder { vocab: self, cache: HashMap::new() }
    }

    /// Concatenated token bytes; specials render as empty.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut buf = Vec::new();
        for &id in ids {
            let b = self
                .token_bytes
                .get(id as usize)
                .ok_or(TokenizerError::IdOutOfRange { id, vocab_size: self.size() })?;
            buf.extend_from_slice(b);
        }
        Ok(String::from_utf8_lossy(&buf).into_owned())
    }

    /// Orthographic form of a token: leading word-boundary space removed;
    /// specials return their canonical names.
    pub fn token_surface(&self, id: u32) -> Result<String> {
        if is_special(id) {
            return Ok(SPECIAL_NAMES[id as usize].to_string());
        }
        let b = self
            .token_bytes
            .get(id as usize)
            .ok_or(TokenizerError::IdOutOfRange { id, vocab_size: self.size() })?;
        let b = b.strip_prefix(b" ").unwrap_or(b);
        Ok(String::from_utf8_lossy(b).into_owned())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{FORMAT_MAGIC} v{FORMAT_VERSION} {}", self.size());
        for &(a, b) in &self.merges {
            let _ = writeln!(s, "{} {}", self.id_to_token[a as usize], self.id_to_token[b as usize]);
        }
        for t in &self.id_to_token {
            let _ = writeln!(s, "{t}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let fmt = |m: String| TokenizerError::Format(m);
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| fmt("empty file".into()))?;
        let parts: Vec<&str> = header.split(' ').collect();
        if parts.len() != 3 || parts[0] != FORMAT_MAGIC {
            return Err(fmt(format!("bad header {header:?}")));
        }
        if parts[1] != format!("v{FORMAT_VERSION}") {
            return Err(fmt(format!("unsupported version {}", parts[1])));
        }
        let size: usize = parts[2].parse().map_err(|_| fmt(format!("bad size {}", parts[2])))?;
        if size < MIN_VOCAB {
            return Err(fmt(format!("size {size} below minimum")));
        }
        let base = Self::from_merges(Vec::new())?;
        let mut lookup = base.token_to_id.clone();
        let mut next = MIN_VOCAB as u32;
        let mut merges = Vec::with_capacity(size - MIN_VOCAB);
        for i in 0..size - MIN_VOCAB {
            let line = lines.next().ok_or_else(|| fmt(format!("missing merge line {i}")))?;
            let (a, b) = line.split_once(' ').ok_or_else(|| fmt(format!("bad merge line {line:?}")))?;
            let ia = *lookup.get(a).ok_or_else(|| fmt(format!("unknown token {a:?}")))?;
            let ib = *lookup.get(b).ok_or_else(|| fmt(format!("unknown token {b:?}")))?;
            merges.push((ia, ib));
            lookup.insert(format!("{a}{b}"), next);
            next += 1;
        }
        let vocab = Self::from_merges(merges)?;
        for (id, expected) in vocab.id_to_token.iter().enumerate() {
            let line = lines.next().ok_or_else(|| fmt(format!("missing token line {id}")))?;
            if line != expected {
                return Err(fmt(format!("token {id} is {line:?}, merges imply {expected:?}")));
            }
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    /// Stable 64-bit hash of the serialized vocabulary.
    pub fn fingerprint(&self) -> u64 {
        let digest = Sha256::digest(self.to_text().as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
    }
}

/// Caching encoder for bulk text.
pub struct Encoder<'a> {
    vocab: &'a Vocab,
    cache: HashMap<String, Vec<u32>>,
}

impl Encoder<'_> {
    pub fn encode(&mut self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for chunk in bytes::pretokenize(text) {
            if let Some(ids) = self.cache.get(chunk) {
                out.extend_from_slice(ids);
            } else {
                let mut ids = Vec::new();
                self.vocab.encode_chunk(chunk.as_bytes(), &mut ids);
                out.extend_from_slice(&ids);
                self.cache.insert(chunk.to_string(), ids);
            }
        }
        out
    }
}
