use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap, HashMap, HashSet};

use super::{bytes, Result, TokenizerError, Vocab, MIN_VOCAB, NUM_SPECIAL};

type Pair = (u32, u32);

struct Words {
    symbols: Vec<Vec<u32>>,
    freq: Vec<i64>,
}

/// Learns merges until the vocabulary reaches `target_vocab_size` or no
/// adjacent pair is left. Each step merges the most frequent pair; ties go
/// to the pair occurring first in the corpus (words ordered by first
/// appearance, then by position within the word).
pub fn train_bpe<I, S>(corpus: I, target_vocab_size: usize) -> Result<Vocab>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    if target_vocab_size < MIN_VOCAB {
        return Err(TokenizerError::TargetTooSmall { target: target_vocab_size });
    }
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut words = Words { symbols: Vec::new(), freq: Vec::new() };
    for line in corpus {
        for chunk in bytes::pretokenize(line.as_ref()) {
            match index.get(chunk) {
                Some(&i) => words.freq[i] += 1,
                None => {
                    index.insert(chunk.to_string(), words.symbols.len());
                    words.symbols.push(chunk.bytes().map(|b| b as u32 + NUM_SPECIAL).collect());
                    words.freq.push(1);
                }
            }
        }
    }
    if words.symbols.is_empty() {
        return Err(TokenizerError::EmptyCorpus);
    }

    let mut counts: HashMap<Pair, i64> = HashMap::new();
    let mut locations: HashMap<Pair, BTreeSet<usize>> = HashMap::new();
    for (wi, w) in words.symbols.iter().enumerate() {
        for p in w.windows(2) {
            let pair = (p[0], p[1]);
            *counts.entry(pair).or_default() += words.freq[wi];
            locations.entry(pair).or_default().insert(wi);
        }
    }
    let mut heap: BinaryHeap<(i64, Reverse<Pair>)> = counts.iter().map(|(&p, &c)| (c, Reverse(p))).collect();

    let wanted = target_vocab_size - MIN_VOCAB;
    let mut merges: Vec<Pair> = Vec::with_capacity(wanted);
    while merges.len() < wanted {
        let Some((top, mut tied)) = pop_max(&mut heap, &counts) else { break };
        while let Some(&(c, Reverse(p))) = heap.peek() {
            if c != top {
                break;
            }
            heap.pop();
            if counts.get(&p) == Some(&c) && !tied.contains(&p) {
                tied.push(p);
            }
        }
        let best = *tied
            .iter()
            .min_by_key(|p| first_occurrence(**p, &words, &locations))
            .expect("at least one candidate");
        for &p in &tied {
            if p != best {
                heap.push((top, Reverse(p)));
            }
        }

        let new_id = (MIN_VOCAB + merges.len()) as u32;
        merges.push(best);
        let affected: Vec<usize> = locations.remove(&best).map(|s| s.into_iter().collect()).unwrap_or_default();
        let mut touched: HashSet<Pair> = HashSet::new();
        for wi in affected {
            let f = words.freq[wi];
            let w = &words.symbols[wi];
            if !w.windows(2).any(|p| (p[0], p[1]) == best) {
                continue;
            }
            for p in w.windows(2) {
                let pair = (p[0], p[1]);
                *counts.get_mut(&pair).expect("counted pair") -= f;
                touched.insert(pair);
            }
            let merged = merge_word(w, best, new_id);
            for p in merged.windows(2) {
                let pair = (p[0], p[1]);
                *counts.entry(pair).or_default() += f;
                locations.entry(pair).or_default().insert(wi);
                touched.insert(pair);
            }
            words.symbols[wi] = merged;
        }
        counts.remove(&best);
        for p in touched {
            if let Some(&c) = counts.get(&p) {
                if c > 0 {
                    heap.push((c, Reverse(p)));
                }
            }
        }
    }
    Vocab::from_merges(merges)
}

/// Pops stale heap entries until a live one is found; returns its count and
/// pair.
fn pop_max(heap: &mut BinaryHeap<(i64, Reverse<Pair>)>, counts: &HashMap<Pair, i64>) -> Option<(i64, Vec<Pair>)> {
    while let Some((c, Reverse(p))) = heap.pop() {
        if c > 0 && counts.get(&p) == Some(&c) {
            return Some((c, vec![p]));
        }
    }
    None
}

fn first_occurrence(pair: Pair, words: &Words, locations: &HashMap<Pair, BTreeSet<usize>>) -> (usize, usize) {
    if let Some(set) = locations.get(&pair) {
        for &wi in set {
            if let Some(pos) = words.symbols[wi].windows(2).position(|p| (p[0], p[1]) == pair) {
                return (wi, pos);
            }
        }
    }
    (usize::MAX, usize::MAX)
}

fn merge_word(w: &[u32], pair: Pair, new_id: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(w.len());
    let mut i = 0;
    while i < w.len() {
        if i + 1 < w.len() && (w[i], w[i + 1]) == pair {
            out.push(new_id);
            i += 2;
        } else {
            out.push(w[i]);
            i += 1;
        }
    }
    out
}
