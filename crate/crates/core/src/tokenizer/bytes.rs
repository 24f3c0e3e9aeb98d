//! Printable byte alphabet and pre-tokenization.

use std::sync::OnceLock;

/// The reversible byte → char table used by byte-level BPE: printable
/// Latin-1 bytes map to themselves, the rest are shifted above U+0100.
/// A space becomes `Ġ`, the word-boundary marker.
pub fn byte_to_char() -> &'static [char; 256] {
    static TABLE: OnceLock<[char; 256]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let printable = |b: u32| (0x21..=0x7E).contains(&b) || (0xA1..=0xAC).contains(&b) || (0xAE..=0xFF).contains(&b);
        let mut table = ['\0'; 256];
        let mut shift = 0u32;
        for b in 0..256u32 {
            table[b as usize] = if printable(b) {
                char::from_u32(b).unwrap()
            } else {
                shift += 1;
                char::from_u32(255 + shift).unwrap()
            };
        }
        table
    })
}

pub fn char_to_byte(c: char) -> Option<u8> {
    byte_to_char().iter().position(|&x| x == c).map(|b| b as u8)
}

pub fn bytes_to_token_string(bytes: &[u8]) -> String {
    let table = byte_to_char();
    bytes.iter().map(|&b| table[b as usize]).collect()
}

pub fn token_string_to_bytes(s: &str) -> Option<Vec<u8>> {
    s.chars().map(char_to_byte).collect()
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Class {
    Letter,
    Number,
    Space,
    Other,
}

fn class(c: char) -> Class {
    if c.is_whitespace() {
        Class::Space
    } else if c.is_alphabetic() {
        Class::Letter
    } else if c.is_numeric() {
        Class::Number
    } else {
        Class::Other
    }
}

/// Splits text into pre-tokens: runs of letters, digits, or other symbols,
/// each optionally carrying one leading space; remaining whitespace runs
/// are their own chunks. Concatenating the chunks reproduces `text`.
pub fn pretokenize(text: &str) -> Vec<&str> {
    let idx: Vec<(usize, char)> = text.char_indices().collect();
    let n = idx.len();
    let pos = |i: usize| if i < n { idx[i].0 } else { text.len() };
    let mut out = Vec::new();
    let mut i = 0;
    while i < n {
        let c = idx[i].1;
        if class(c) == Class::Space {
            let mut j = i;
            while j < n && class(idx[j].1) == Class::Space {
                j += 1;
            }
            if j < n && idx[j - 1].1 == ' ' {
                if j - 1 > i {
                    out.push(&text[pos(i)..pos(j - 1)]);
                }
                let start = j - 1;
                let end = run_end(&idx, j);
                out.push(&text[pos(start)..pos(end)]);
                i = end;
            } else {
                out.push(&text[pos(i)..pos(j)]);
                i = j;
            }
        } else {
            let end = run_end(&idx, i);
            out.push(&text[pos(i)..pos(end)]);
            i = end;
        }
    }
    out
}

fn run_end(idx: &[(usize, char)], start: usize) -> usize {
    let k = class(idx[start].1);
    let mut j = start + 1;
    while j < idx.len() && class(idx[j].1) == k {
        j += 1;
    }
    j
}
