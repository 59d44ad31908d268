//! Byte-level tokenization, corpora and prefix sampling.

use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::model::TokenSequence;

/// Every byte becomes the token of the same value.
pub fn tokenize(text: &[u8]) -> TokenSequence {
    TokenSequence::new(text.iter().map(|&b| b as u32).collect())
}

pub fn detokenize(tokens: &TokenSequence) -> Result<Vec<u8>> {
    tokens
        .as_slice()
        .iter()
        .map(|&t| u8::try_from(t).map_err(|_| Error::Domain(format!("token {t} is not a byte"))))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusSource {
    File(PathBuf),
    Synthetic { seed: u64, bytes: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub source: CorpusSource,
    pub tokens: Vec<u32>,
}

impl Corpus {
    pub fn from_file(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            source: CorpusSource::File(path.to_path_buf()),
            tokens: tokenize(&bytes).into_vec(),
        })
    }

    pub fn from_text(text: &str) -> Self {
        Self {
            source: CorpusSource::Synthetic { seed: 0, bytes: text.len() },
            tokens: tokenize(text.as_bytes()).into_vec(),
        }
    }

    /// Procedurally generated English-like prose of at least `bytes` bytes.
    pub fn synthetic(seed: u64, bytes: usize) -> Self {
        Self {
            source: CorpusSource::Synthetic { seed, bytes },
            tokens: tokenize(synthetic_text(seed, bytes).as_bytes()).into_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

const NAMES: &[&str] = &[
    "Anna", "Boris", "Clara", "David", "Elena", "Felix", "Greta", "Hugo", "Ida", "Jonas", "Karla", "Lukas",
];
const NOUNS: &[&str] = &[
    "river", "village", "teacher", "garden", "market", "letter", "window", "bridge", "forest", "engine",
    "library", "harbor", "station", "kitchen", "mountain", "painter", "doctor", "farmer", "ship", "road",
    "storm", "child", "table", "lamp", "song", "story", "city", "field", "school", "tower",
];
const ADJECTIVES: &[&str] = &[
    "old", "quiet", "bright", "small", "heavy", "green", "cold", "distant", "busy", "gentle", "narrow",
    "early", "strange", "warm", "empty", "careful",
];
const VERBS: &[&str] = &[
    "watches", "finds", "carries", "opens", "follows", "builds", "visits", "paints", "reads", "remembers",
    "crosses", "repairs", "leaves", "describes", "answers", "keeps",
];
const INTRANSITIVE: &[&str] = &[
    "waits", "sleeps", "returns", "rests", "sings", "listens", "wanders", "works", "smiles", "falls",
];
const ADVERBS: &[&str] = &["slowly", "often", "again", "quickly", "never", "always", "quietly", "today"];
const PREPOSITIONS: &[&str] = &["near", "behind", "under", "across", "beside", "through", "above", "around"];
const OPENERS: &[&str] = &[
    "In the morning", "After the rain", "Every winter", "Later that day", "Before dawn", "At night",
    "During the market", "Once a year",
];
const CONNECTIVES: &[&str] = &["and", "but", "because", "while", "so"];

fn noun_phrase(rng: &mut ChaCha8Rng) -> String {
    let noun = *NOUNS.choose(rng).expect("nonempty");
    if rng.random_bool(0.4) {
        format!("the {} {noun}", ADJECTIVES.choose(rng).expect("nonempty"))
    } else if rng.random_bool(0.2) {
        NAMES.choose(rng).expect("nonempty").to_string()
    } else {
        format!("the {noun}")
    }
}

fn clause(rng: &mut ChaCha8Rng) -> String {
    let subject = noun_phrase(rng);
    let mut s = if rng.random_bool(0.6) {
        format!("{subject} {} {}", VERBS.choose(rng).expect("nonempty"), noun_phrase(rng))
    } else {
        format!("{subject} {}", INTRANSITIVE.choose(rng).expect("nonempty"))
    };
    if rng.random_bool(0.35) {
        s = format!("{s} {} {}", PREPOSITIONS.choose(rng).expect("nonempty"), noun_phrase(rng));
    }
    if rng.random_bool(0.25) {
        s = format!("{s} {}", ADVERBS.choose(rng).expect("nonempty"));
    }
    s
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().collect::<String>() + c.as_str(),
        None => String::new(),
    }
}

fn sentence(rng: &mut ChaCha8Rng) -> String {
    let mut s = clause(rng);
    if rng.random_bool(0.3) {
        s = format!("{s} {} {}", CONNECTIVES.choose(rng).expect("nonempty"), clause(rng));
    }
    if rng.random_bool(0.2) {
        s = format!("{}, {s}", OPENERS.choose(rng).expect("nonempty").to_lowercase());
    }
    let end = if rng.random_bool(0.1) { "?" } else { "." };
    format!("{}{end}", capitalize(&s))
}

/// Seeded prose built from a small grammar: paragraphs of 3–7 sentences.
pub fn synthetic_text(seed: u64, min_bytes: usize) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::with_capacity(min_bytes + 256);
    while out.len() < min_bytes {
        let k = rng.random_range(3..=7);
        let para: Vec<String> = (0..k).map(|_| sentence(&mut rng)).collect();
        out.push_str(&para.join(" "));
        out.push_str("\n\n");
    }
    out
}

/// Sampled prefixes together with their corpus offsets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefixSample {
    pub seed: u64,
    pub offsets: Vec<usize>,
    pub prefixes: Vec<TokenSequence>,
}

/// `count` windows of `n` tokens starting at offsets drawn uniformly from
/// `0..=len−n`.
pub fn sample_prefixes(corpus: &Corpus, count: usize, n: usize, seed: u64) -> Result<PrefixSample> {
    ensure!(n > 0, Argument, "prefix length must be positive");
    ensure!(
        corpus.len() >= n,
        Argument,
        "corpus of {} tokens is shorter than prefix length {n}",
        corpus.len()
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hi = corpus.len() - n;
    let offsets: Vec<usize> = (0..count).map(|_| rng.random_range(0..=hi)).collect();
    let prefixes = offsets
        .iter()
        .map(|&o| TokenSequence::new(corpus.tokens[o..o + n].to_vec()))
        .collect();
    Ok(PrefixSample {
        seed,
        offsets,
        prefixes,
    })
}
