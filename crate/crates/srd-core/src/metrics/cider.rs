//! CIDEr: consensus-based caption score. For each n in 1..4, candidate and
//! references become TF-IDF vectors over n-grams (IDF from the evaluation
//! split's reference corpus, clamped at zero); per-reference cosines are
//! averaged, the four n-levels are averaged, and the result is scaled by 10.
//!
//! IDF uses `log(n_docs / (1 + df))`, so an n-gram present in every
//! document — or in a corpus of one document — carries zero weight. Cosines
//! against a zero vector are defined as 0.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};

use super::ngram;

const MAX_ORDER: usize = 4;

/// Document-frequency tables for n = 1..4, built once per evaluation split.
/// One document = one reference caption.
#[derive(Debug, Clone)]
pub struct IdfCorpus {
    n_docs: usize,
    df: Vec<HashMap<Vec<String>, u32>>,
}

impl IdfCorpus {
    pub fn from_documents(documents: &[Vec<String>]) -> Result<Self> {
        if documents.is_empty() {
            return Err(Error::config("idf corpus requires at least one document"));
        }
        let mut df = vec![HashMap::new(); MAX_ORDER];
        for doc in documents {
            for (n, table) in df.iter_mut().enumerate() {
                let mut seen: Vec<&[String]> = ngram::counts(doc, n + 1).into_keys().collect();
                seen.sort();
                for gram in seen {
                    *table.entry(gram.to_vec()).or_insert(0) += 1;
                }
            }
        }
        Ok(IdfCorpus {
            n_docs: documents.len(),
            df,
        })
    }

    pub fn n_docs(&self) -> usize {
        self.n_docs
    }

    /// Clamped inverse document frequency of one n-gram.
    fn idf(&self, n: usize, gram: &[String]) -> f64 {
        let df = self.df[n - 1].get(gram).copied().unwrap_or(0);
        (self.n_docs as f64 / (1.0 + f64::from(df))).ln().max(0.0)
    }
}

/// TF-IDF vector for one n level; BTreeMap so float reductions iterate in
/// a fixed order.
fn tfidf_vector(tokens: &[String], n: usize, corpus: &IdfCorpus) -> BTreeMap<Vec<String>, f64> {
    let mut vector = BTreeMap::new();
    for (gram, count) in ngram::counts(tokens, n) {
        let idf = corpus.idf(n, gram);
        if idf > 0.0 {
            vector.insert(gram.to_vec(), f64::from(count) * idf);
        }
    }
    vector
}

fn cosine(a: &BTreeMap<Vec<String>, f64>, b: &BTreeMap<Vec<String>, f64>) -> f64 {
    let mut dot = 0.0;
    for (gram, va) in a {
        if let Some(vb) = b.get(gram) {
            dot += va * vb;
        }
    }
    let norm = |v: &BTreeMap<Vec<String>, f64>| v.values().map(|x| x * x).sum::<f64>().sqrt();
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na * nb)
}

/// CIDEr score of one candidate against its references.
pub fn cider(
    candidate: &[String],
    references: &[Vec<String>],
    corpus: &IdfCorpus,
) -> Result<f64> {
    if references.is_empty() {
        return Err(Error::contract("cider requires at least one reference"));
    }
    if references.iter().any(|r| r.is_empty()) {
        return Err(Error::contract("cider references must be non-empty"));
    }
    if candidate.is_empty() {
        return Ok(0.0);
    }
    let mut level_sum = 0.0;
    for n in 1..=MAX_ORDER {
        let cand_vec = tfidf_vector(candidate, n, corpus);
        let mut ref_sum = 0.0;
        for r in references {
            ref_sum += cosine(&cand_vec, &tfidf_vector(r, n, corpus));
        }
        level_sum += ref_sum / references.len() as f64;
    }
    Ok(10.0 * level_sum / MAX_ORDER as f64)
}
