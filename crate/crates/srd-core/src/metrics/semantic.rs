//! Semantic consistency and linguistic fluency.
//!
//! SC is the cosine similarity between sentence embeddings of the clean
//! reference-model caption and the evaluated model's caption, clamped to
//! [0, 1]. The default embedding is TF-IDF over word unigrams and bigrams
//! with IDF fitted on the clean reference corpus; the backend is a trait so
//! dense encoders can slot in.
//!
//! LF is the perplexity ratio `ppl_clean / ppl_bd`; ratios above 1 are
//! anomalies (the evaluated caption reads *more* fluent than the clean one)
//! and are excluded from the average, with the count reported.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Sentence embedding as a sparse feature → weight map. Deterministic per
/// backend instance.
pub trait EmbeddingBackend {
    fn embed(&self, caption: &[String]) -> BTreeMap<String, f64>;
}

/// TF-IDF over unigrams + bigrams, IDF from a fixed corpus with the same
/// `log(n / (1 + df))` clamp used by CIDEr.
#[derive(Debug, Clone)]
pub struct TfIdfEncoder {
    idf: BTreeMap<String, f64>,
}

/// Feature keys: `u:word` and `b:first second`.
fn features(caption: &[String]) -> BTreeMap<String, u32> {
    let mut feats = BTreeMap::new();
    for w in caption {
        *feats.entry(format!("u:{w}")).or_insert(0) += 1;
    }
    for pair in caption.windows(2) {
        *feats.entry(format!("b:{} {}", pair[0], pair[1])).or_insert(0) += 1;
    }
    feats
}

impl TfIdfEncoder {
    pub fn from_corpus(documents: &[Vec<String>]) -> Result<Self> {
        if documents.is_empty() {
            return Err(Error::config("encoder corpus requires at least one document"));
        }
        let mut df: BTreeMap<String, u32> = BTreeMap::new();
        for doc in documents {
            for feat in features(doc).into_keys() {
                *df.entry(feat).or_insert(0) += 1;
            }
        }
        let n = documents.len() as f64;
        let idf = df
            .into_iter()
            .map(|(feat, count)| (feat, (n / (1.0 + f64::from(count))).ln().max(0.0)))
            .collect();
        Ok(TfIdfEncoder { idf })
    }
}

impl EmbeddingBackend for TfIdfEncoder {
    fn embed(&self, caption: &[String]) -> BTreeMap<String, f64> {
        features(caption)
            .into_iter()
            .filter_map(|(feat, count)| {
                let idf = self.idf.get(&feat).copied().unwrap_or(0.0);
                (idf > 0.0).then(|| (feat, f64::from(count) * idf))
            })
            .collect()
    }
}

fn cosine(a: &BTreeMap<String, f64>, b: &BTreeMap<String, f64>) -> f64 {
    let mut dot = 0.0;
    for (feat, va) in a {
        if let Some(vb) = b.get(feat) {
            dot += va * vb;
        }
    }
    let norm = |v: &BTreeMap<String, f64>| v.values().map(|x| x * x).sum::<f64>().sqrt();
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    if a == b {
        // Identical embeddings have cosine exactly 1; computing it through
        // sqrt would leave it one ulp short and break exact baselines.
        return 1.0;
    }
    dot / (na * nb)
}

/// Per-image similarity of clean vs evaluated caption, in [0, 1]. Zero
/// embeddings on either side yield 0.
pub fn semantic_consistency(
    clean_caption: &[String],
    bd_caption: &[String],
    encoder: &dyn EmbeddingBackend,
) -> Result<f64> {
    if clean_caption.is_empty() || bd_caption.is_empty() {
        return Err(Error::contract("semantic consistency requires non-empty captions"));
    }
    let sim = cosine(&encoder.embed(clean_caption), &encoder.embed(bd_caption));
    Ok(sim.max(0.0))
}

/// Mean per-image similarity over caption pairs.
pub fn avg_semantic(
    pairs: &[(Vec<String>, Vec<String>)],
    encoder: &dyn EmbeddingBackend,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::contract("avg_semantic needs at least one caption pair"));
    }
    let mut sum = 0.0;
    for (clean, bd) in pairs {
        sum += semantic_consistency(clean, bd, encoder)?;
    }
    Ok(sum / pairs.len() as f64)
}

/// `ppl_clean / ppl_bd`; values above 1 are flagged by the averaging step.
pub fn fluency_ratio(ppl_clean: f64, ppl_bd: f64) -> Result<f64> {
    if !(ppl_clean > 0.0 && ppl_bd > 0.0) || !ppl_clean.is_finite() || !ppl_bd.is_finite() {
        return Err(Error::arithmetic(format!(
            "fluency ratio needs positive finite perplexities, got ({ppl_clean}, {ppl_bd})"
        )));
    }
    Ok(ppl_clean / ppl_bd)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FluencyAverage {
    pub mean: f64,
    pub excluded: usize,
    /// Every ratio was > 1; the mean is then defined as 1.0.
    pub all_excluded: bool,
}

/// Mean over ratios ≤ 1, with the number of excluded anomalies. When every
/// ratio is an anomaly the mean is defined as 1.0 and flagged.
pub fn avg_fluency(ratios: &[f64]) -> Result<FluencyAverage> {
    if ratios.is_empty() {
        return Err(Error::contract("avg_fluency needs at least one ratio"));
    }
    if let Some(bad) = ratios.iter().find(|r| !r.is_finite() || **r <= 0.0) {
        return Err(Error::arithmetic(format!("invalid fluency ratio {bad}")));
    }
    let kept: Vec<f64> = ratios.iter().copied().filter(|r| *r <= 1.0).collect();
    let excluded = ratios.len() - kept.len();
    if kept.is_empty() {
        return Ok(FluencyAverage {
            mean: 1.0,
            excluded,
            all_excluded: true,
        });
    }
    Ok(FluencyAverage {
        mean: kept.iter().sum::<f64>() / kept.len() as f64,
        excluded,
        all_excluded: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    fn encoder4() -> TfIdfEncoder {
        TfIdfEncoder::from_corpus(&[
            toks("a photo of dog"),
            toks("a photo of cat"),
            toks("a photo of dog ball"),
            toks("a photo of tree"),
        ])
        .unwrap()
    }

    #[test]
    fn identical_captions_have_similarity_one() {
        let enc = encoder4();
        let c = toks("a photo of dog ball");
        assert!((semantic_consistency(&c, &c, &enc).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn disjoint_captions_have_similarity_zero() {
        let enc = encoder4();
        let got = semantic_consistency(&toks("a photo of cat"), &toks("tree"), &enc).unwrap();
        assert_eq!(got, 0.0);
    }

    #[test]
    fn dropped_token_case_matches_hand_computed_value() {
        // Fixed 4-document IDF corpus; only dog/ball features carry weight.
        let enc = encoder4();
        let got =
            semantic_consistency(&toks("a photo of dog ball"), &toks("a photo of dog"), &enc)
                .unwrap();
        assert!((got - 0.383332888988391).abs() < 1e-12, "got {got}");
    }

    #[test]
    fn zero_embedding_yields_zero_similarity() {
        // "a photo of" appears in every corpus document, so its features all
        // clamp to IDF 0 and the embedding is empty.
        let enc = encoder4();
        let got = semantic_consistency(&toks("a photo of"), &toks("a photo of dog"), &enc).unwrap();
        assert_eq!(got, 0.0);
    }

    #[test]
    fn empty_caption_is_rejected() {
        let enc = encoder4();
        assert!(semantic_consistency(&[], &toks("a"), &enc).is_err());
    }

    #[test]
    fn avg_semantic_is_the_arithmetic_mean() {
        let enc = encoder4();
        let same = toks("a photo of dog ball");
        let disjoint = toks("cat");
        let pairs = vec![
            (same.clone(), same.clone()),
            (toks("a photo of dog"), disjoint),
        ];
        let got = avg_semantic(&pairs, &enc).unwrap();
        assert!((got - 0.5).abs() < 1e-12, "got {got}");
        assert!(avg_semantic(&[], &enc).is_err());
    }

    #[test]
    fn avg_semantic_matches_brute_force_on_seeded_pairs() {
        let enc = encoder4();
        let sentences = [
            "a photo of dog",
            "a photo of dog ball",
            "a photo of cat",
            "a photo of tree",
            "a photo of dog tree",
        ];
        let mut pairs = Vec::new();
        for (i, a) in sentences.iter().enumerate() {
            for b in sentences.iter().skip(i) {
                pairs.push((toks(a), toks(b)));
            }
        }
        let mean = avg_semantic(&pairs, &enc).unwrap();
        let mut brute = 0.0;
        for (a, b) in &pairs {
            brute += semantic_consistency(a, b, &enc).unwrap();
        }
        brute /= pairs.len() as f64;
        assert!((mean - brute).abs() < 1e-12);
    }

    #[test]
    fn fluency_ratio_arithmetic() {
        assert!((fluency_ratio(20.0, 40.0).unwrap() - 0.5).abs() < 1e-15);
        assert!((fluency_ratio(30.0, 30.0).unwrap() - 1.0).abs() < 1e-15);
        assert!((fluency_ratio(40.0, 20.0).unwrap() - 2.0).abs() < 1e-15);
        assert!(fluency_ratio(0.0, 1.0).is_err());
        assert!(fluency_ratio(1.0, f64::NAN).is_err());
    }

    #[test]
    fn anomalies_are_excluded_from_the_fluency_mean() {
        let got = avg_fluency(&[0.5, 2.0]).unwrap();
        assert!((got.mean - 0.5).abs() < 1e-15);
        assert_eq!(got.excluded, 1);
        assert!(!got.all_excluded);

        let got = avg_fluency(&[1.0, 1.0]).unwrap();
        assert!((got.mean - 1.0).abs() < 1e-15);
        assert_eq!(got.excluded, 0);

        let got = avg_fluency(&[0.2, 0.4, 0.6]).unwrap();
        assert!((got.mean - 0.4).abs() < 1e-15);
        assert_eq!(got.excluded, 0);
    }

    #[test]
    fn all_excluded_case_is_flagged() {
        let got = avg_fluency(&[1.5, 2.0]).unwrap();
        assert_eq!(got.mean, 1.0);
        assert_eq!(got.excluded, 2);
        assert!(got.all_excluded);
        assert!(avg_fluency(&[]).is_err());
    }
}
