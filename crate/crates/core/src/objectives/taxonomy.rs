//! Token classes used by the Token Type, First Char and stop-word objectives.

use std::collections::HashSet;
use std::sync::OnceLock;

use regex::Regex;

use crate::tokenizer::{is_special, Vocab};

/// NLTK English stop-word list (179 entries).
pub const STOP_WORDS: &[&str] = &[
    "i", "me", "my", "myself", "we", "our", "ours", "ourselves", "you", "you're", "you've", "you'll", "you'd",
    "your", "yours", "yourself", "yourselves", "he", "him", "his", "himself", "she", "she's", "her", "hers",
    "herself", "it", "it's", "its", "itself", "they", "them", "their", "theirs", "themselves", "what", "which",
    "who", "whom", "this", "that", "that'll", "these", "those", "am", "is", "are", "was", "were", "be", "been",
    "being", "have", "has", "had", "having", "do", "does", "did", "doing", "a", "an", "the", "and", "but", "if",
    "or", "because", "as", "until", "while", "of", "at", "by", "for", "with", "about", "against", "between",
    "into", "through", "during", "before", "after", "above", "below", "to", "from", "up", "down", "in", "out",
    "on", "off", "over", "under", "again", "further", "then", "once", "here", "there", "when", "where", "why",
    "how", "all", "any", "both", "each", "few", "more", "most", "other", "some", "such", "no", "nor", "not",
    "only", "own", "same", "so", "than", "too", "very", "s", "t", "can", "will", "just", "don", "don't",
    "should", "should've", "now", "d", "ll", "m", "o", "re", "ve", "y", "ain", "aren", "aren't", "couldn",
    "couldn't", "didn", "didn't", "doesn", "doesn't", "hadn", "hadn't", "hasn", "hasn't", "haven", "haven't",
    "isn", "isn't", "ma", "mightn", "mightn't", "mustn", "mustn't", "needn", "needn't", "shan", "shan't",
    "shouldn", "shouldn't", "wasn", "wasn't", "weren", "weren't", "won", "won't", "wouldn", "wouldn't",
];

pub const NUM_TYPE_CLASSES: usize = 4;
pub const NUM_FIRST_CHAR_CLASSES: usize = 29;
pub const FIRST_CHAR_DIGIT: u8 = 26;
pub const FIRST_CHAR_PUNCT: u8 = 27;
pub const FIRST_CHAR_OTHER: u8 = 28;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum TokenType {
    Stop = 0,
    Digit = 1,
    Punct = 2,
    Content = 3,
}

impl TokenType {
    pub fn name(self) -> &'static str {
        match self {
            TokenType::Stop => "stop",
            TokenType::Digit => "digit",
            TokenType::Punct => "punct",
            TokenType::Content => "content",
        }
    }
}

struct Patterns {
    digits: Regex,
    punct: Regex,
    leading_digit: Regex,
    leading_punct: Regex,
    stop: HashSet<&'static str>,
}

// Unicode punctuation (P*) plus the ASCII punctuation characters that
// Unicode files under symbols, such as `$`, `+` and `|`.
const PUNCT_CLASS: &str = r"[\p{P}!-/:-@\[-`{-~]";

fn patterns() -> &'static Patterns {
    static P: OnceLock<Patterns> = OnceLock::new();
    P.get_or_init(|| Patterns {
        digits: Regex::new(r"^\p{Nd}+$").expect("valid regex"),
        punct: Regex::new(&format!("^{PUNCT_CLASS}+$")).expect("valid regex"),
        leading_digit: Regex::new(r"^\p{Nd}").expect("valid regex"),
        leading_punct: Regex::new(&format!("^{PUNCT_CLASS}")).expect("valid regex"),
        stop: STOP_WORDS.iter().copied().collect(),
    })
}

pub fn is_stop_word(surface: &str) -> bool {
    patterns().stop.contains(surface.to_lowercase().as_str())
}

/// Stop word, then all-digit, then all-punctuation, else content.
pub fn classify_type(surface: &str) -> TokenType {
    let p = patterns();
    let lower = surface.to_lowercase();
    if p.stop.contains(lower.as_str()) {
        TokenType::Stop
    } else if p.digits.is_match(&lower) {
        TokenType::Digit
    } else if p.punct.is_match(&lower) {
        TokenType::Punct
    } else {
        TokenType::Content
    }
}

/// ASCII `a`–`z` in either case → 0–25, leading decimal digit → 26, leading punctuation → 27,
/// anything else (including the empty surface) → 28.
pub fn classify_first_char(surface: &str) -> u8 {
    let p = patterns();
    match surface.chars().next() {
        Some(c) if c.is_ascii_alphabetic() => c.to_ascii_lowercase() as u8 - b'a',
        Some(_) if p.leading_digit.is_match(surface) => FIRST_CHAR_DIGIT,
        Some(_) if p.leading_punct.is_match(surface) => FIRST_CHAR_PUNCT,
        _ => FIRST_CHAR_OTHER,
    }
}

/// Per-id class tables for one vocabulary. Special ids get the content /
/// other classes; they are never selected for corruption.
#[derive(Debug, Clone)]
pub struct VocabClasses {
    pub vocab_size: usize,
    pub token_type: Vec<u8>,
    pub first_char: Vec<u8>,
    pub stop_word: Vec<u8>,
}

impl VocabClasses {
    pub fn new(vocab: &Vocab) -> Self {
        let n = vocab.size();
        let mut token_type = vec![TokenType::Content as u8; n];
        let mut first_char = vec![FIRST_CHAR_OTHER; n];
        let mut stop_word = vec![0u8; n];
        for id in 0..n as u32 {
            if is_special(id) {
                continue;
            }
            let s = vocab.token_surface(id).expect("id in range");
            let t = classify_type(&s);
            token_type[id as usize] = t as u8;
            first_char[id as usize] = classify_first_char(&s);
            stop_word[id as usize] = (t == TokenType::Stop) as u8;
        }
        Self { vocab_size: n, token_type, first_char, stop_word }
    }
}
