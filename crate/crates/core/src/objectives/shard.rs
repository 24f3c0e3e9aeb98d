//! Binary export of corrupted rows for offline auditing.
//!
//! Layout: magic, version, objective tag, max_len, vocab fingerprint, row
//! count, then per row the real-length-prefixed input ids, labels and loss
//! mask.

use std::path::Path;

use super::{CorruptedRow, ObjectiveKind};
use crate::binio::{Reader, Writer};
use crate::corpus::CorpusError;

const MAGIC: &[u8; 8] = b"TLSHARD\0";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Shard {
    pub objective: ObjectiveKind,
    pub max_len: usize,
    pub vocab_fingerprint: u64,
    /// Rows truncated to their real length.
    pub rows: Vec<CorruptedRow>,
}

impl Shard {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.u8(self.objective.tag());
        w.u32(self.max_len as u32);
        w.u64(self.vocab_fingerprint);
        w.u64(self.rows.len() as u64);
        for r in &self.rows {
            w.u32s(&r.input_ids);
            w.u32s(&r.labels);
            w.u8s(&r.loss_mask);
        }
        w.buf
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self, CorpusError> {
        let fmt = |m: &str| CorpusError::Format(m.to_string());
        let mut r = Reader::new(data);
        if r.take(MAGIC.len())? != MAGIC {
            return Err(fmt("bad shard magic"));
        }
        if r.u32()? != VERSION {
            return Err(fmt("unsupported shard version"));
        }
        let objective = ObjectiveKind::from_tag(r.u8()?).ok_or_else(|| fmt("unknown objective tag"))?;
        let max_len = r.u32()? as usize;
        let vocab_fingerprint = r.u64()?;
        let count = r.u64()? as usize;
        let mut rows = Vec::with_capacity(count.min(r.remaining() / 24));
        for _ in 0..count {
            let input_ids = r.u32s()?;
            let labels = r.u32s()?;
            let loss_mask = r.u8s()?;
            if labels.len() != input_ids.len() || loss_mask.len() != input_ids.len() || input_ids.len() > max_len {
                return Err(fmt("row arrays disagree in length"));
            }
            rows.push(CorruptedRow { input_ids, labels, loss_mask });
        }
        if !r.is_at_end() {
            return Err(fmt("trailing bytes"));
        }
        Ok(Self { objective, max_len, vocab_fingerprint, rows })
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
