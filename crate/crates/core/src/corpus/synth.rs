//! Synthetic English-like text over a fixed lexicon.
//!
//! Used for the bundled sample corpus, in-memory test corpora, and the
//! word-order probe grammar. Sentences mix stop words, content words,
//! numbers, punctuation and a few non-ASCII words, with skewed word
//! frequencies.

use rand::Rng;

use crate::rng::{self, Domain};

pub struct Lexicon {
    pub determiners: &'static [&'static str],
    pub adjectives: &'static [&'static str],
    pub nouns: &'static [&'static str],
    pub verbs: &'static [&'static str],
    pub adverbs: &'static [&'static str],
    pub prepositions: &'static [&'static str],
    pub conjunctions: &'static [&'static str],
    pub names: &'static [&'static str],
}

pub static LEXICON: Lexicon = Lexicon {
    determiners: &["the", "a", "this", "that", "every", "some", "no", "my", "their", "our", "his", "her"],
    adjectives: &[
        "old", "new", "small", "large", "quiet", "bright", "dark", "green", "red", "blue", "cold", "warm", "early",
        "late", "strange", "simple", "heavy", "light", "gentle", "rapid", "slow", "ancient", "modern", "curious",
        "famous", "hidden", "open", "broken", "empty", "narrow", "wide", "wooden", "silver", "golden", "tired",
        "happy", "proud", "careful", "distant", "local", "naïve", "rough", "smooth", "sharp", "soft", "loud",
        "clever", "young", "wild", "calm", "busy", "rare", "common", "deep", "shallow", "bitter", "sweet", "plain",
        "northern", "southern", "eastern", "western", "public", "private", "final", "second", "third", "main",
    ],
    nouns: &[
        "house", "river", "city", "garden", "teacher", "student", "doctor", "farmer", "village", "mountain",
        "letter", "book", "window", "door", "table", "road", "bridge", "market", "king", "queen", "soldier",
        "painter", "writer", "ship", "train", "station", "forest", "island", "valley", "castle", "church",
        "school", "library", "museum", "harbor", "field", "storm", "winter", "summer", "morning", "evening",
        "story", "song", "machine", "engine", "council", "army", "company", "family", "friend",
        "neighbor", "child", "horse", "dog", "cat", "bird", "fish", "tree", "flower", "stone", "wall", "tower",
        "lamp", "clock", "coin", "map", "key", "box", "boat", "coat", "hat", "shoe", "bottle", "glass", "cup",
        "bread", "cheese", "apple", "wine", "café", "résumé", "piano", "violin", "camera", "journal", "report",
        "theory", "experiment", "question", "answer", "problem", "lesson", "province",
        "kingdom", "empire", "republic", "festival", "concert", "novel", "poem", "chapter", "album", "film",
        "player", "team", "season", "league", "match", "victory", "defeat", "battle", "treaty", "election",
        "president", "minister", "judge", "lawyer", "merchant", "sailor", "captain", "pilot", "engineer",
        "scientist", "professor", "artist", "singer", "dancer", "actor", "editor", "reader", "visitor",
    ],
    verbs: &[
        "saw", "found", "built", "opened", "closed", "carried", "painted", "wrote", "read", "visited", "left",
        "crossed", "followed", "watched", "heard", "helped", "moved", "sold", "bought", "kept", "lost", "won",
        "joined", "described", "studied", "designed", "repaired", "discovered", "protected", "defended",
        "replaced", "destroyed", "admired", "praised", "ignored", "questioned", "answered", "recorded",
        "published", "released", "founded", "named", "called", "met", "greeted", "thanked", "served", "fed",
        "taught", "trained", "led", "guided", "chased", "caught", "held", "lifted", "pushed", "pulled", "washed",
        "cleaned", "cooked", "ate", "drank", "played", "sang", "drew", "measured", "counted", "tested",
    ],
    adverbs: &[
        "quickly", "slowly", "quietly", "carefully", "often", "rarely", "never", "always", "soon", "later",
        "again", "together", "suddenly", "finally", "nearly", "almost", "gladly", "badly", "well",
    ],
    prepositions: &[
        "in", "on", "at", "near", "under", "over", "behind", "beside", "through", "across", "into", "from",
        "with", "without", "after", "before", "during", "against", "toward", "about",
    ],
    conjunctions: &["and", "but", "while", "because", "although", "so", "or", "until", "when", "if"],
    names: &[
        "Anna", "Marcus", "Elena", "Tomas", "Sofia", "Jonas", "Clara", "Victor", "Ingrid", "Pablo", "Yuki",
        "Omar", "Zoë", "José", "Björn", "Chloé", "London", "Paris", "Zürich", "Kraków", "Lisbon", "Oslo",
        "Cairo", "Lima", "Québec", "Sydney",
    ],
};

/// Index skewed toward the front of a list, roughly Zipfian.
pub fn skewed<R: Rng + ?Sized>(rng: &mut R, n: usize) -> usize {
    let u: f64 = rng.random();
    ((n as f64) * u * u * u) as usize % n
}

fn pick<R: Rng + ?Sized>(rng: &mut R, list: &'static [&'static str]) -> &'static str {
    list[skewed(rng, list.len())]
}

fn noun_phrase<R: Rng + ?Sized>(rng: &mut R, out: &mut Vec<String>) {
    let lex = &LEXICON;
    match rng.random_range(0..10) {
        0 => out.push(pick(rng, lex.names).to_string()),
        1 => {
            out.push(number(rng));
            out.push(plural(pick(rng, lex.nouns)));
        }
        _ => {
            out.push(pick(rng, lex.determiners).to_string());
            for _ in 0..rng.random_range(0..3) {
                out.push(pick(rng, lex.adjectives).to_string());
            }
            let noun = pick(rng, lex.nouns);
            out.push(if rng.random_bool(0.2) { plural(noun) } else { noun.to_string() });
        }
    }
    if rng.random_bool(0.15) {
        out.push(pick(rng, lex.prepositions).to_string());
        out.push(pick(rng, lex.determiners).to_string());
        out.push(pick(rng, lex.nouns).to_string());
    }
}

fn plural(noun: &str) -> String {
    let b = noun.as_bytes();
    match b {
        [.., c, b'y'] if !b"aeiou".contains(c) => format!("{}ies", &noun[..noun.len() - 1]),
        [.., b's' | b'x'] | [.., b'c' | b's', b'h'] => format!("{noun}es"),
        _ => format!("{noun}s"),
    }
}

fn number<R: Rng + ?Sized>(rng: &mut R) -> String {
    match rng.random_range(0..6) {
        0 => format!("{}", rng.random_range(1800..2030)),
        1 => format!("{}.{}", rng.random_range(0..100), rng.random_range(0..10)),
        2 => {
            let n = rng.random_range(1..40);
            let suffix = match n % 10 {
                1 if n != 11 => "st",
                2 if n != 12 => "nd",
                3 if n != 13 => "rd",
                _ => "th",
            };
            format!("{n}{suffix}")
        }
        _ => format!("{}", rng.random_range(2..100)),
    }
}

fn clause<R: Rng + ?Sized>(rng: &mut R, out: &mut Vec<String>) {
    let lex = &LEXICON;
    noun_phrase(rng, out);
    if rng.random_bool(0.15) {
        out.push(pick(rng, lex.adverbs).to_string());
    }
    out.push(pick(rng, lex.verbs).to_string());
    noun_phrase(rng, out);
    if rng.random_bool(0.3) {
        out.push(pick(rng, lex.prepositions).to_string());
        noun_phrase(rng, out);
    }
    if rng.random_bool(0.1) {
        out.push(pick(rng, lex.adverbs).to_string());
    }
}

pub(crate) fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().collect::<String>() + c.as_str(),
        None => String::new(),
    }
}

/// One sentence with terminal punctuation.
pub fn sentence<R: Rng + ?Sized>(rng: &mut R) -> String {
    let lex = &LEXICON;
    let mut words: Vec<String> = Vec::new();
    if rng.random_bool(0.15) {
        words.push(pick(rng, lex.prepositions).to_string());
        words.push(number(rng));
        words.push(",".into());
    }
    clause(rng, &mut words);
    match rng.random_range(0..10) {
        0 | 1 => {
            words.push(",".into());
            words.push(pick(rng, lex.conjunctions).to_string());
            clause(rng, &mut words);
        }
        2 => {
            words.push("—".into());
            noun_phrase(rng, &mut words);
        }
        3 => {
            words.push("(".into());
            words.push(number(rng));
            words.push(")".into());
        }
        _ => {}
    }
    let end = match rng.random_range(0..20) {
        0 => "?",
        1 => "!",
        2 => ";",
        _ => ".",
    };
    let mut s = String::new();
    for (i, w) in words.iter().enumerate() {
        let glue = i == 0
            || matches!(w.as_str(), "," | ")")
            || (i > 0 && words[i - 1] == "(");
        if !glue {
            s.push(' ');
        }
        if i == 0 {
            s.push_str(&capitalize(w));
        } else {
            s.push_str(w);
        }
    }
    s.push_str(end);
    s
}

/// A document of `sentences` sentences on one line.
pub fn document<R: Rng + ?Sized>(rng: &mut R, sentences: usize) -> String {
    (0..sentences).map(|_| sentence(rng)).collect::<Vec<_>>().join(" ")
}

/// Documents totalling at least `min_bytes` of text.
pub fn generate_corpus(seed: u64, min_bytes: usize) -> Vec<String> {
    let mut rng = rng::stream(seed, Domain::Synthetic, &[0]);
    let mut docs = Vec::new();
    let mut total = 0;
    while total < min_bytes {
        let n = rng.random_range(1..12);
        let d = document(&mut rng, n);
        total += d.len() + 1;
        docs.push(d);
    }
    docs
}
