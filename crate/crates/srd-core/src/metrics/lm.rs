//! Interpolated trigram language model with add-one smoothing per level.
//!
//! `p(w | u, v) = λ₁·p₁(w) + λ₂·p₂(w | v) + λ₃·p₃(w | u, v)` with
//! λ = (0.2, 0.3, 0.5). Each level is add-one smoothed over the closed
//! vocabulary (corpus types + the reserved unknown and end markers), so
//! every level — and therefore the mixture — sums to 1 over the vocabulary
//! for any context, seen or not.
//!
//! Sentences are padded with two start markers and one end marker; the end
//! marker is a predicted token (perplexity over T = len + 1 positions), the
//! start markers are context only. Out-of-vocabulary query words map to the
//! unknown token.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const UNKNOWN_TOKEN: &str = "<unk>";
const SENTENCE_START: &str = "<s>";
const SENTENCE_END: &str = "</s>";
/// Interpolation weights for (unigram, bigram, trigram); positive, sum 1.
pub const LAMBDAS: [f64; 3] = [0.2, 0.3, 0.5];

#[derive(Debug, Clone, PartialEq)]
pub struct NGramLM {
    vocab: BTreeSet<String>,
    unigram: BTreeMap<String, u64>,
    bigram: BTreeMap<(String, String), u64>,
    trigram: BTreeMap<(String, String, String), u64>,
    bigram_ctx: BTreeMap<String, u64>,
    trigram_ctx: BTreeMap<(String, String), u64>,
    predicted_tokens: u64,
}

/// Fit the trigram model on a clean caption corpus.
pub fn fit_lm(corpus: &[Vec<String>]) -> Result<NGramLM> {
    if corpus.is_empty() {
        return Err(Error::config("language model corpus must be non-empty"));
    }
    let mut vocab: BTreeSet<String> = BTreeSet::new();
    for sentence in corpus {
        if sentence.is_empty() {
            return Err(Error::contract("language model corpus contains an empty sentence"));
        }
        for tok in sentence {
            if tok == UNKNOWN_TOKEN || tok == SENTENCE_START || tok == SENTENCE_END {
                return Err(Error::contract(format!(
                    "token {tok:?} collides with a reserved marker"
                )));
            }
            vocab.insert(tok.clone());
        }
    }
    vocab.insert(UNKNOWN_TOKEN.to_string());
    vocab.insert(SENTENCE_END.to_string());

    let mut lm = NGramLM {
        vocab,
        unigram: BTreeMap::new(),
        bigram: BTreeMap::new(),
        trigram: BTreeMap::new(),
        bigram_ctx: BTreeMap::new(),
        trigram_ctx: BTreeMap::new(),
        predicted_tokens: 0,
    };
    for sentence in corpus {
        let mut padded: Vec<&str> = vec![SENTENCE_START, SENTENCE_START];
        padded.extend(sentence.iter().map(String::as_str));
        padded.push(SENTENCE_END);
        for i in 2..padded.len() {
            let (u, v, w) = (padded[i - 2], padded[i - 1], padded[i]);
            *lm.unigram.entry(w.to_string()).or_insert(0) += 1;
            lm.predicted_tokens += 1;
            *lm.bigram.entry((v.to_string(), w.to_string())).or_insert(0) += 1;
            *lm.bigram_ctx.entry(v.to_string()).or_insert(0) += 1;
            *lm
                .trigram
                .entry((u.to_string(), v.to_string(), w.to_string()))
                .or_insert(0) += 1;
            *lm
                .trigram_ctx
                .entry((u.to_string(), v.to_string()))
                .or_insert(0) += 1;
        }
    }
    Ok(lm)
}

impl NGramLM {
    /// The closed vocabulary (corpus types + unknown + end marker).
    pub fn vocabulary(&self) -> impl Iterator<Item = &str> {
        self.vocab.iter().map(String::as_str)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.vocab.contains(word)
    }

    /// OOV words collapse onto the unknown token.
    pub fn map_token<'a>(&self, word: &'a str) -> &'a str {
        if self.vocab.contains(word) {
            word
        } else {
            UNKNOWN_TOKEN
        }
    }

    /// Interpolated `p(word | u, v)`. Context words may be anything,
    /// including the start marker or unseen words; the distribution over
    /// the vocabulary sums to 1 for every context.
    pub fn probability(&self, word: &str, context: (&str, &str)) -> f64 {
        let k = self.vocab.len() as f64;
        let (u, v) = context;
        let c1 = self.unigram.get(word).copied().unwrap_or(0) as f64;
        let p1 = (c1 + 1.0) / (self.predicted_tokens as f64 + k);
        let c2 = self
            .bigram
            .get(&(v.to_string(), word.to_string()))
            .copied()
            .unwrap_or(0) as f64;
        let ctx2 = self.bigram_ctx.get(v).copied().unwrap_or(0) as f64;
        let p2 = (c2 + 1.0) / (ctx2 + k);
        let c3 = self
            .trigram
            .get(&(u.to_string(), v.to_string(), word.to_string()))
            .copied()
            .unwrap_or(0) as f64;
        let ctx3 = self
            .trigram_ctx
            .get(&(u.to_string(), v.to_string()))
            .copied()
            .unwrap_or(0) as f64;
        let p3 = (c3 + 1.0) / (ctx3 + k);
        LAMBDAS[0] * p1 + LAMBDAS[1] * p2 + LAMBDAS[2] * p3
    }

    /// `exp(−(1/T)·Σ log p)` over the caption plus the end marker.
    pub fn perplexity(&self, caption: &[String]) -> Result<f64> {
        if caption.is_empty() {
            return Err(Error::contract("perplexity of an empty caption is undefined"));
        }
        let mapped: Vec<&str> = caption.iter().map(|w| self.map_token(w)).collect();
        let mut padded: Vec<&str> = vec![SENTENCE_START, SENTENCE_START];
        padded.extend(&mapped);
        padded.push(SENTENCE_END);
        let mut log_sum = 0.0;
        for i in 2..padded.len() {
            log_sum += self.probability(padded[i], (padded[i - 2], padded[i - 1])).ln();
        }
        let t = (mapped.len() + 1) as f64;
        Ok((-log_sum / t).exp())
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string(&LmFile::from(self)).expect("lm serialization cannot fail")
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let file: LmFile = serde_json::from_str(text)
            .map_err(|e| Error::contract(format!("malformed language model file: {e}")))?;
        file.into_lm()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json_string())
            .map_err(|e| Error::io(format!("writing language model {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading language model {}", path.display()), e))?;
        Self::from_json_str(&text)
    }
}

/// On-disk shape: count maps flattened to entry lists (JSON maps only take
/// string keys).
#[derive(Serialize, Deserialize)]
struct LmFile {
    version: u32,
    vocab: Vec<String>,
    unigram: Vec<(String, u64)>,
    bigram: Vec<((String, String), u64)>,
    trigram: Vec<((String, String, String), u64)>,
    bigram_ctx: Vec<(String, u64)>,
    trigram_ctx: Vec<((String, String), u64)>,
    predicted_tokens: u64,
}

const LM_FILE_VERSION: u32 = 1;

impl From<&NGramLM> for LmFile {
    fn from(lm: &NGramLM) -> Self {
        LmFile {
            version: LM_FILE_VERSION,
            vocab: lm.vocab.iter().cloned().collect(),
            unigram: lm.unigram.iter().map(|(k, v)| (k.clone(), *v)).collect(),
            bigram: lm.bigram.iter().map(|(k, v)| (k.clone(), *v)).collect(),
            trigram: lm.trigram.iter().map(|(k, v)| (k.clone(), *v)).collect(),
            bigram_ctx: lm.bigram_ctx.iter().map(|(k, v)| (k.clone(), *v)).collect(),
            trigram_ctx: lm.trigram_ctx.iter().map(|(k, v)| (k.clone(), *v)).collect(),
            predicted_tokens: lm.predicted_tokens,
        }
    }
}

impl LmFile {
    fn into_lm(self) -> Result<NGramLM> {
        if self.version != LM_FILE_VERSION {
            return Err(Error::contract(format!(
                "language model file version {} unsupported (expected {LM_FILE_VERSION})",
                self.version
            )));
        }
        Ok(NGramLM {
            vocab: self.vocab.into_iter().collect(),
            unigram: self.unigram.into_iter().collect(),
            bigram: self.bigram.into_iter().collect(),
            trigram: self.trigram.into_iter().collect(),
            bigram_ctx: self.bigram_ctx.into_iter().collect(),
            trigram_ctx: self.trigram_ctx.into_iter().collect(),
            predicted_tokens: self.predicted_tokens,
        })
    }
}
