//! Document ingestion, greedy packing into fixed-length sequences, and
//! seeded epoch batching.

pub mod synth;

use std::io::BufRead;
use std::path::Path;

use rand::seq::SliceRandom;
use thiserror::Error;

use crate::binio::{Reader, Truncated, Writer};
use crate::rng::{self, Domain};
use crate::tokenizer::{Vocab, CLS, PAD, SEP};

pub const MIN_MAX_LEN: usize = 8;
pub const CORPUS_MAGIC: &[u8; 8] = b"TLCORPUS";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("max_len {0} is below the minimum of {MIN_MAX_LEN}")]
    MaxLenTooSmall(usize),
    #[error("batch size must be positive")]
    ZeroBatchSize,
    #[error("invalid sequence: {0}")]
    InvalidSequence(String),
    #[error("corpus was packed with vocabulary {found:016x}, expected {expected:016x}")]
    FingerprintMismatch { expected: u64, found: u64 },
    #[error("malformed corpus file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<Truncated> for CorpusError {
    fn from(t: Truncated) -> Self {
        CorpusError::Format(t.to_string())
    }
}

pub type Result<T> = std::result::Result<T, CorpusError>;

/// `[CLS] tokens... [SEP] [PAD]...` padded to `max_len`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub attention_mask: Vec<u8>,
    pub real_len: usize,
}

impl TokenSequence {
    /// Wraps `content` (which may contain internal SEPs) in CLS/SEP and pads.
    pub fn from_content(content: &[u32], max_len: usize) -> Result<Self> {
        let real_len = content.len() + 2;
        if real_len > max_len {
            return Err(CorpusError::InvalidSequence(format!("{real_len} tokens exceed max_len {max_len}")));
        }
        let mut ids = Vec::with_capacity(max_len);
        ids.push(CLS);
        ids.extend_from_slice(content);
        ids.push(SEP);
        ids.resize(max_len, PAD);
        let mut attention_mask = vec![1u8; real_len];
        attention_mask.resize(max_len, 0);
        Ok(Self { ids, attention_mask, real_len })
    }

    pub fn max_len(&self) -> usize {
        self.ids.len()
    }

    /// Tokens between the leading CLS and the final SEP.
    pub fn content(&self) -> &[u32] {
        &self.ids[1..self.real_len - 1]
    }

    pub fn validate(&self, max_len: usize, vocab_size: usize) -> Result<()> {
        let bad = |m: String| Err(CorpusError::InvalidSequence(m));
        if self.ids.len() != max_len || self.attention_mask.len() != max_len {
            return bad(format!("length {} / mask {} != max_len {max_len}", self.ids.len(), self.attention_mask.len()));
        }
        if self.real_len < 2 || self.real_len > max_len {
            return bad(format!("real_len {} out of range", self.real_len));
        }
        if self.ids[0] != CLS || self.ids[self.real_len - 1] != SEP {
            return bad("sequence must start with CLS and end with SEP".into());
        }
        for (i, (&id, &m)) in self.ids.iter().zip(&self.attention_mask).enumerate() {
            let real = i < self.real_len;
            if m != real as u8 || (!real && id != PAD) || (real && id == PAD) {
                return bad(format!("mask/padding inconsistent at position {i}"));
            }
            if id as usize >= vocab_size {
                return bad(format!("id {id} at position {i} outside vocabulary of {vocab_size}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PackedCorpus {
    pub sequences: Vec<TokenSequence>,
    pub vocab_fingerprint: u64,
    pub max_len: usize,
}

/// Encodes each document and packs the results.
pub fn pack<I, S>(vocab: &Vocab, documents: I, max_len: usize) -> Result<PackedCorpus>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    pack_with(vocab, documents, max_len, Overlong::Truncate)
}

pub fn pack_with<I, S>(vocab: &Vocab, documents: I, max_len: usize, overlong: Overlong) -> Result<PackedCorpus>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut enc = vocab.encoder();
    pack_encoded_with(documents.into_iter().map(|d| enc.encode(d.as_ref())), max_len, vocab.fingerprint(), overlong)
}

/// Greedy packing of already-encoded documents: documents are joined with
/// SEP until the next one would overflow `max_len - 2`. When the pending
/// sequence is under half full, the next document is truncated into it
/// instead, so every sequence but the last has `real_len >= max_len / 2`.
/// Overlong documents are truncated; empty ones are skipped.
pub fn pack_encoded<I>(documents: I, max_len: usize, vocab_fingerprint: u64) -> Result<PackedCorpus>
where
    I: IntoIterator<Item = Vec<u32>>,
{
    pack_encoded_with(documents, max_len, vocab_fingerprint, Overlong::Truncate)
}

/// What happens to a document longer than `max_len - 2` tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Overlong {
    #[default]
    Truncate,
    /// Cut into consecutive full-length pieces, each packed as a document.
    Split,
}

pub fn pack_encoded_with<I>(documents: I, max_len: usize, vocab_fingerprint: u64, overlong: Overlong) -> Result<PackedCorpus>
where
    I: IntoIterator<Item = Vec<u32>>,
{
    if max_len < MIN_MAX_LEN {
        return Err(CorpusError::MaxLenTooSmall(max_len));
    }
    let budget = max_len - 2;
    let pieces = documents.into_iter().flat_map(move |mut doc| match overlong {
        Overlong::Truncate => {
            doc.truncate(budget);
            vec![doc]
        }
        Overlong::Split => doc.chunks(budget).map(<[u32]>::to_vec).collect(),
    });
    let mut sequences = Vec::new();
    let mut cur: Vec<u32> = Vec::with_capacity(budget);
    for mut doc in pieces {
        if doc.is_empty() {
            continue;
        }
        if cur.is_empty() {
            cur = doc;
        } else if cur.len() + 1 + doc.len() <= budget {
            cur.push(SEP);
            cur.extend_from_slice(&doc);
        } else {
            if cur.len() + 2 < max_len / 2 {
                let room = budget - cur.len() - 1;
                cur.push(SEP);
                cur.extend_from_slice(&doc[..room]);
                doc.clear();
            }
            sequences.push(TokenSequence::from_content(&cur, max_len)?);
            cur = doc;
        }
    }
    if !cur.is_empty() {
        sequences.push(TokenSequence::from_content(&cur, max_len)?);
    }
    Ok(PackedCorpus { sequences, vocab_fingerprint, max_len })
}

/// Non-blank lines of a text file, one document each.
pub fn read_documents(path: &Path) -> Result<Vec<String>> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut docs = Vec::new();
    for line in file.lines() {
        let line = line?;
        let line = line.trim_end_matches('\r');
        if !line.trim().is_empty() {
            docs.push(line.to_string());
        }
    }
    Ok(docs)
}

/// Seeded permutation of `0..n` for one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, Domain::Epoch, &[epoch]));
    order
}

/// Batches of one epoch, in permuted order; the last batch may be short.
pub struct Batches<'a> {
    corpus: &'a PackedCorpus,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl<'a> Iterator for Batches<'a> {
    type Item = Vec<&'a TokenSequence>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let batch = self.order[self.pos..end].iter().map(|&i| &self.corpus.sequences[i]).collect();
        self.pos = end;
        Some(batch)
    }
}

impl PackedCorpus {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// Count of real tokens excluding CLS and SEP markers.
    pub fn content_tokens(&self) -> usize {
        self.sequences.iter().map(|s| s.content().iter().filter(|&&id| id != SEP).count()).sum()
    }

    pub fn batches_per_epoch(&self, batch_size: usize) -> usize {
        self.len().div_ceil(batch_size.max(1))
    }

    pub fn batches(&self, batch_size: usize, seed: u64) -> Result<Batches<'_>> {
        self.epoch_batches(batch_size, seed, 0)
    }

    pub fn epoch_batches(&self, batch_size: usize, seed: u64, epoch: u64) -> Result<Batches<'_>> {
        if batch_size == 0 {
            return Err(CorpusError::ZeroBatchSize);
        }
        Ok(Batches { corpus: self, order: epoch_order(self.len(), seed, epoch), batch_size, pos: 0 })
    }

    pub fn check_vocab(&self, vocab: &Vocab) -> Result<()> {
        let expected = vocab.fingerprint();
        if expected != self.vocab_fingerprint {
            return Err(CorpusError::FingerprintMismatch { expected, found: self.vocab_fingerprint });
        }
        for s in &self.sequences {
            s.validate(self.max_len, vocab.size())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(CORPUS_MAGIC);
        w.u32(VERSION);
        w.u32(self.max_len as u32);
        w.u64(self.vocab_fingerprint);
        w.u64(self.sequences.len() as u64);
        for s in &self.sequences {
            w.u32s(&s.ids[..s.real_len]);
        }
        w.buf
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let mut r = Reader::new(data);
        if r.take(CORPUS_MAGIC.len())? != CORPUS_MAGIC {
            return Err(CorpusError::Format("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CorpusError::Format(format!("unsupported version {version}")));
        }
        let max_len = r.u32()? as usize;
        if max_len < MIN_MAX_LEN {
            return Err(CorpusError::MaxLenTooSmall(max_len));
        }
        let vocab_fingerprint = r.u64()?;
        let count = r.u64()? as usize;
        let mut sequences = Vec::with_capacity(count.min(r.remaining() / 8));
        for _ in 0..count {
            let real = r.u32s()?;
            if real.len() < 2 || real[0] != CLS || real[real.len() - 1] != SEP {
                return Err(CorpusError::Format("stored sequence is not CLS ... SEP".into()));
            }
            sequences.push(TokenSequence::from_content(&real[1..real.len() - 1], max_len)?);
        }
        if !r.is_at_end() {
            return Err(CorpusError::Format("trailing bytes".into()));
        }
        Ok(Self { sequences, vocab_fingerprint, max_len })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(n: usize, start: u32) -> Vec<u32> {
        (0..n as u32).map(|i| 5 + (start + i) % 200).collect()
    }

    #[test]
    fn two_short_docs_share_a_sequence() {
        let c = pack_encoded([doc(200, 0), doc(200, 7)], 512, 1).unwrap();
        assert_eq!(c.len(), 1);
        let s = &c.sequences[0];
        assert_eq!(s.real_len, 200 + 1 + 200 + 2);
        assert_eq!(s.ids[201], SEP);
        s.validate(512, 1000).unwrap();
    }

    #[test]
    fn overlong_doc_is_truncated() {
        let c = pack_encoded([doc(600, 0)], 512, 1).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c.sequences[0].real_len, 512);
        assert_eq!(c.sequences[0].content(), &doc(600, 0)[..510]);
    }

    #[test]
    fn overlong_doc_can_be_split() {
        let c = pack_encoded_with([doc(600, 0)], 512, 1, Overlong::Split).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.sequences[0].content(), &doc(600, 0)[..510]);
        assert_eq!(c.sequences[1].content(), &doc(600, 0)[510..]);
        assert_eq!(c.content_tokens(), 600);
    }

    #[test]
    fn empty_input() {
        assert!(pack_encoded(Vec::<Vec<u32>>::new(), 64, 1).unwrap().is_empty());
        assert!(pack_encoded([vec![], vec![]], 64, 1).unwrap().is_empty());
    }

    #[test]
    fn max_len_minimum() {
        assert!(matches!(pack_encoded([doc(3, 0)], 7, 1), Err(CorpusError::MaxLenTooSmall(7))));
    }

    #[test]
    fn under_half_full_sequence_absorbs_next_doc() {
        let c = pack_encoded([doc(10, 0), doc(100, 0), doc(5, 0)], 64, 1).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.sequences[0].real_len, 64);
        assert_eq!(c.sequences[1].content(), doc(5, 0).as_slice());
    }

    #[test]
    fn epoch_order_is_seeded() {
        assert_eq!(epoch_order(200, 3, 0), epoch_order(200, 3, 0));
        assert_ne!(epoch_order(200, 3, 0), epoch_order(200, 4, 0));
        assert_ne!(epoch_order(200, 3, 0), epoch_order(200, 3, 1));
    }

    #[test]
    fn batches_cover_epoch_with_partial_tail() {
        let docs: Vec<Vec<u32>> = (0..10).map(|i| doc(20, i)).collect();
        let c = pack_encoded(docs, 24, 1).unwrap();
        assert_eq!(c.len(), 10);
        let sizes: Vec<usize> = c.batches(4, 9).unwrap().map(|b| b.len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        assert!(c.batches(0, 9).is_err());
        let mut seen: Vec<u32> = c.batches(4, 9).unwrap().flatten().map(|s| s.ids[1]).collect();
        seen.sort();
        let mut all: Vec<u32> = c.sequences.iter().map(|s| s.ids[1]).collect();
        all.sort();
        assert_eq!(seen, all);
    }

    #[test]
    fn binary_round_trip_and_rejection() {
        let c = pack_encoded([doc(30, 0), doc(50, 3), doc(7, 1)], 40, 0xfeed).unwrap();
        let bytes = c.to_bytes();
        assert_eq!(PackedCorpus::from_bytes(&bytes).unwrap(), c);
        assert!(PackedCorpus::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(PackedCorpus::from_bytes(&bad), Err(CorpusError::Format(_))));
    }
}
