//! Synthetic byte text with long-range structure.
//!
//! Paragraphs are built from a fixed pseudo-word lexicon. Each paragraph
//! introduces a couple of capitalised entity names and repeats them many
//! characters later, and parenthesised or quoted asides open and close at
//! distances beyond a small attention window, so routing has something to
//! learn.

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::config::CorpusConfig;
use crate::tensor::rng::SeedStream;

const ONSETS: &[&str] = &["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "sh", "tr"];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ai", "ou"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    pub train: Vec<u8>,
    pub eval: Vec<u8>,
    pub words: Vec<String>,
    pub entities: Vec<String>,
}

fn syllables(rng: &mut ChaCha8Rng, n: usize) -> String {
    (0..n)
        .map(|_| format!("{}{}", ONSETS.choose(rng).unwrap(), VOWELS.choose(rng).unwrap()))
        .collect()
}

fn lexicon(rng: &mut ChaCha8Rng, n: usize, min_syl: usize, capitalise: bool) -> Vec<String> {
    let mut out: Vec<String> = Vec::with_capacity(n);
    while out.len() < n {
        let k = rng.random_range(min_syl..min_syl + 2);
        let mut w = syllables(rng, k);
        if capitalise {
            w[..1].make_ascii_uppercase();
        }
        if !out.contains(&w) {
            out.push(w);
        }
    }
    out
}

struct Writer<'a> {
    rng: ChaCha8Rng,
    words: &'a [String],
    entities: &'a [String],
    out: Vec<u8>,
}

impl Writer<'_> {
    fn push_word(&mut self, w: &str) {
        if !self.out.is_empty() && !matches!(self.out.last(), Some(b' ' | b'\n' | b'(' | b'"')) {
            self.out.push(b' ');
        }
        self.out.extend_from_slice(w.as_bytes());
    }

    fn clause(&mut self, cast: &[&str], len: usize) {
        for _ in 0..len {
            if self.rng.random_bool(0.15) {
                let name = *cast.choose(&mut self.rng).unwrap();
                self.push_word(name);
            } else {
                let w = self.words.choose(&mut self.rng).unwrap().clone();
                self.push_word(&w);
            }
        }
    }

    fn sentence(&mut self, cast: &[&str]) {
        let n = self.rng.random_range(4..10);
        self.clause(cast, n);
        match self.rng.random_range(0..6) {
            0 => {
                self.push_word("(");
                let n = self.rng.random_range(5..10);
                self.clause(cast, n);
                self.out.push(b')');
            }
            1 => {
                self.out.push(b',');
                self.push_word("\"");
                let n = self.rng.random_range(5..10);
                self.clause(cast, n);
                self.out.push(b'"');
            }
            2 => {
                self.out.push(b',');
                let n = self.rng.random_range(2..6);
                self.clause(cast, n);
            }
            _ => {}
        }
        self.out.push(if self.rng.random_bool(0.15) { b'?' } else { b'.' });
    }

    fn paragraph(&mut self) {
        let entities = self.entities;
        let a = entities.choose(&mut self.rng).unwrap();
        let b = entities.choose(&mut self.rng).unwrap();
        let cast = [a.as_str(), b.as_str()];
        self.push_word(cast[0]);
        for _ in 0..self.rng.random_range(3..7) {
            self.sentence(&cast);
        }
        self.out.push(b'\n');
    }

    fn fill(mut self, bytes: usize) -> Vec<u8> {
        while self.out.len() < bytes {
            self.paragraph();
        }
        self.out.truncate(bytes);
        self.out
    }
}

/// Deterministic corpus for `seed`; train and eval text come from separate
/// streams over the same lexicon.
pub fn generate(cfg: &CorpusConfig, seed: u64) -> Corpus {
    let s = SeedStream::new(seed).split(0xC0);
    let mut lex_rng = s.stream(0);
    let words = lexicon(&mut lex_rng, cfg.words, 1, false);
    let entities = lexicon(&mut lex_rng, cfg.entities, 2, true);
    let make = |stream: u64, bytes: usize| {
        Writer { rng: s.stream(stream), words: &words, entities: &entities, out: Vec::with_capacity(bytes) }.fill(bytes)
    };
    let train = make(1, cfg.train_bytes);
    let eval = make(2, cfg.eval_bytes);
    Corpus { train, eval, words, entities }
}

/// Coarse byte classes used for group purity on the synthetic corpus.
pub fn byte_categories() -> BTreeMap<usize, String> {
    (0u8..=255)
        .map(|b| {
            let c = match b {
                b' ' | b'\n' => "space",
                b'.' | b',' | b'?' | b'(' | b')' | b'"' => "punctuation",
                b'A'..=b'Z' => "capital",
                b'a' | b'e' | b'i' | b'o' | b'u' => "vowel",
                b'a'..=b'z' => "consonant",
                _ => "other",
            };
            (b as usize, c.to_string())
        })
        .collect()
}

/// Printable rendering of one byte for tables.
pub fn decode_byte(b: usize) -> String {
    match b as u8 {
        b' ' => "' '".to_string(),
        b'\n' => "'\\n'".to_string(),
        c if c.is_ascii_graphic() => format!("'{}'", c as char),
        c => format!("0x{c:02x}"),
    }
}

/// `batch` random windows of `len` bytes from `text`.
pub fn sample_windows(text: &[u8], len: usize, batch: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    (0..batch)
        .map(|_| {
            let start = rng.random_range(0..=text.len() - len);
            text[start..start + len].iter().map(|&b| b as usize).collect()
        })
        .collect()
}

/// Non-overlapping windows from the start of `text`.
pub fn fixed_windows(text: &[u8], len: usize, count: usize) -> Vec<Vec<usize>> {
    text.chunks_exact(len).take(count).map(|c| c.iter().map(|&b| b as usize).collect()).collect()
}
