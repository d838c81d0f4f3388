//! Caption-quality and attack metrics: BLEU-4, CIDEr, trigram-LM
//! perplexity, semantic consistency, linguistic fluency with anomaly
//! exclusion, the combined semantic fidelity score, and attack success
//! rate — plus the CSV/Markdown report emitters used by the CLI.

pub mod bleu;
pub mod cider;
pub mod lm;
mod ngram;
pub mod semantic;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use bleu::{bleu4, bleu4_with_smoothing};
pub use cider::{cider, IdfCorpus};
pub use lm::{fit_lm, NGramLM, UNKNOWN_TOKEN};
pub use semantic::{
    avg_fluency, avg_semantic, fluency_ratio, semantic_consistency, EmbeddingBackend,
    FluencyAverage, TfIdfEncoder,
};

/// Weight of semantic consistency in the semantic fidelity score.
pub const SFS_ALPHA: f64 = 0.5;

/// `SFS = α·S + (1−α)·F` on [0, 1] scores.
pub fn sfs(s: f64, f: f64, alpha: f64) -> Result<f64> {
    for (name, v) in [("S", s), ("F", f), ("alpha", alpha)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::config(format!("sfs input {name}={v} outside [0, 1]")));
        }
    }
    Ok(alpha * s + (1.0 - alpha) * f)
}

/// Fraction of captions containing the target phrase as a case-insensitive
/// contiguous token subsequence.
pub fn asr(captions: &[Vec<String>], target_phrase: &[String]) -> Result<f64> {
    if target_phrase.is_empty() {
        return Err(Error::config("asr requires a non-empty target phrase"));
    }
    if captions.is_empty() {
        return Err(Error::contract("asr requires at least one caption"));
    }
    let needle: Vec<String> = target_phrase.iter().map(|t| t.to_lowercase()).collect();
    let mut hits = 0usize;
    for caption in captions {
        let hay: Vec<String> = caption.iter().map(|t| t.to_lowercase()).collect();
        if needle.len() <= hay.len()
            && hay
                .windows(needle.len())
                .any(|w| w.iter().zip(&needle).all(|(a, b)| a == b))
        {
            hits += 1;
        }
    }
    Ok(hits as f64 / captions.len() as f64)
}

/// One row of a results table. Scores are stored at display scale —
/// BLEU/SC/LF/SFS ×100, CIDEr ×10, ASR in percent — rounded to one
/// decimal, all in [0, 100].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dataset: String,
    pub model: String,
    pub bleu4: f64,
    pub cider: f64,
    pub sc: f64,
    pub lf: f64,
    pub sfs: f64,
    pub asr: f64,
    pub n_samples: usize,
    pub n_lf_excluded: usize,
}

/// Raw (unscaled) metric values: BLEU/SC/LF/SFS/ASR in [0, 1], CIDEr in
/// [0, 10].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawScores {
    pub bleu4: f64,
    pub cider: f64,
    pub sc: f64,
    pub lf: f64,
    pub sfs: f64,
    pub asr: f64,
}

fn round1(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

impl MetricReport {
    pub fn from_raw(
        dataset: impl Into<String>,
        model: impl Into<String>,
        raw: RawScores,
        n_samples: usize,
        n_lf_excluded: usize,
    ) -> Result<Self> {
        let dataset = dataset.into();
        let model = model.into();
        for name in [&dataset, &model] {
            if name.is_empty() || name.contains([',', '|', '\n']) {
                return Err(Error::contract(format!(
                    "report label {name:?} must be non-empty and free of delimiters"
                )));
            }
        }
        for (name, v, hi) in [
            ("bleu4", raw.bleu4, 1.0),
            ("cider", raw.cider, 10.0),
            ("sc", raw.sc, 1.0),
            ("lf", raw.lf, 1.0),
            ("sfs", raw.sfs, 1.0),
            ("asr", raw.asr, 1.0),
        ] {
            if !v.is_finite() || v < 0.0 || v > hi {
                return Err(Error::arithmetic(format!(
                    "raw {name}={v} outside [0, {hi}]"
                )));
            }
        }
        Ok(MetricReport {
            dataset,
            model,
            bleu4: round1(raw.bleu4 * 100.0),
            cider: round1(raw.cider * 10.0),
            sc: round1(raw.sc * 100.0),
            lf: round1(raw.lf * 100.0),
            sfs: round1(raw.sfs * 100.0),
            asr: round1(raw.asr * 100.0),
            n_samples,
            n_lf_excluded,
        })
    }
}

/// Inputs for scoring one model's captions on one split. Slices are
/// parallel, indexed by sample.
#[derive(Debug, Clone, Copy)]
pub struct CaptionSetEval<'a> {
    pub dataset: &'a str,
    pub model: &'a str,
    /// Captions produced by the model under evaluation.
    pub candidates: &'a [Vec<String>],
    /// Ground-truth reference captions per sample.
    pub references: &'a [Vec<Vec<String>>],
    /// Captions from the clean reference model (SC/LF anchor).
    pub clean_captions: &'a [Vec<String>],
    /// When present, the ASR column counts this phrase; otherwise it reads 0.
    pub target_phrase: Option<&'a [String]>,
}

/// Score a caption set: mean BLEU/CIDEr against references, SC/LF against
/// the clean-model captions, SFS on the two means, ASR on the target.
pub fn evaluate_captions(
    inputs: &CaptionSetEval,
    language_model: &NGramLM,
    encoder: &dyn EmbeddingBackend,
    idf: &IdfCorpus,
    sfs_alpha: f64,
) -> Result<MetricReport> {
    let n = inputs.candidates.len();
    if n == 0 {
        return Err(Error::contract("evaluation needs at least one sample"));
    }
    if inputs.references.len() != n || inputs.clean_captions.len() != n {
        return Err(Error::contract(format!(
            "parallel slices disagree: {} candidates, {} references, {} clean captions",
            n,
            inputs.references.len(),
            inputs.clean_captions.len()
        )));
    }

    let mut bleu_sum = 0.0;
    let mut cider_sum = 0.0;
    let mut sc_pairs = Vec::with_capacity(n);
    let mut lf_ratios = Vec::with_capacity(n);
    for i in 0..n {
        bleu_sum += bleu4(&inputs.candidates[i], &inputs.references[i])?;
        cider_sum += cider(&inputs.candidates[i], &inputs.references[i], idf)?;
        sc_pairs.push((inputs.clean_captions[i].clone(), inputs.candidates[i].clone()));
        let ppl_clean = language_model.perplexity(&inputs.clean_captions[i])?;
        let ppl_bd = language_model.perplexity(&inputs.candidates[i])?;
        lf_ratios.push(fluency_ratio(ppl_clean, ppl_bd)?);
    }
    let s = avg_semantic(&sc_pairs, encoder)?;
    let fluency = avg_fluency(&lf_ratios)?;
    let combined = sfs(s, fluency.mean, sfs_alpha)?;
    let attack_rate = match inputs.target_phrase {
        Some(phrase) => asr(inputs.candidates, phrase)?,
        None => 0.0,
    };
    MetricReport::from_raw(
        inputs.dataset,
        inputs.model,
        RawScores {
            bleu4: bleu_sum / n as f64,
            cider: cider_sum / n as f64,
            sc: s,
            lf: fluency.mean,
            sfs: combined,
            asr: attack_rate,
        },
        n,
        fluency.excluded,
    )
}

/// Stable column order shared by the CSV and Markdown emitters.
const COLUMNS: [&str; 8] = ["dataset", "model", "B@4", "C", "SC", "LF", "SFS", "ASR"];

pub fn reports_to_csv(reports: &[MetricReport]) -> String {
    let mut out = COLUMNS.join(",");
    out.push('\n');
    for r in reports {
        out.push_str(&format!(
            "{},{},{:.1},{:.1},{:.1},{:.1},{:.1},{:.1}\n",
            r.dataset, r.model, r.bleu4, r.cider, r.sc, r.lf, r.sfs, r.asr
        ));
    }
    out
}

pub fn reports_to_markdown(reports: &[MetricReport]) -> String {
    let mut out = format!("| {} |\n", COLUMNS.join(" | "));
    out.push_str(&format!("|{}\n", " --- |".repeat(COLUMNS.len())));
    for r in reports {
        out.push_str(&format!(
            "| {} | {} | {:.1} | {:.1} | {:.1} | {:.1} | {:.1} | {:.1} |\n",
            r.dataset, r.model, r.bleu4, r.cider, r.sc, r.lf, r.sfs, r.asr
        ));
    }
    out
}
