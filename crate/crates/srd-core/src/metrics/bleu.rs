//! BLEU-4: geometric mean of modified n-gram precisions (n = 1..4) times a
//! brevity penalty against the closest reference length. Unsmoothed by
//! default — any zero precision zeroes the score — with an optional epsilon
//! floor for very short captions.

use crate::error::{Error, Result};

use super::ngram;

/// Canonical unsmoothed BLEU-4.
pub fn bleu4(candidate: &[String], references: &[Vec<String>]) -> Result<f64> {
    bleu4_with_smoothing(candidate, references, None)
}

/// BLEU-4 with an optional precision floor: when `epsilon` is set, an
/// n-gram level with zero matches scores `epsilon / total` instead of
/// collapsing the whole score to 0.
pub fn bleu4_with_smoothing(
    candidate: &[String],
    references: &[Vec<String>],
    epsilon: Option<f64>,
) -> Result<f64> {
    if references.is_empty() {
        return Err(Error::contract("bleu4 requires at least one reference"));
    }
    if references.iter().any(|r| r.is_empty()) {
        return Err(Error::contract("bleu4 references must be non-empty"));
    }
    if let Some(eps) = epsilon {
        if eps <= 0.0 {
            return Err(Error::config("smoothing epsilon must be positive"));
        }
    }
    if candidate.is_empty() {
        // Degenerate candidate: defined as score 0 rather than an error so
        // batch evaluation keeps going; callers may count these.
        return Ok(0.0);
    }

    let mut log_precision_sum = 0.0;
    for n in 1..=4usize {
        let cand_counts = ngram::counts(candidate, n);
        let total: u32 = cand_counts.values().sum();
        if total == 0 {
            // Candidate shorter than n tokens: no n-grams to score.
            match epsilon {
                Some(eps) => {
                    log_precision_sum += eps.ln();
                    continue;
                }
                None => return Ok(0.0),
            }
        }
        let mut clipped = 0u32;
        for (gram, count) in &cand_counts {
            let best_ref = references
                .iter()
                .map(|r| ngram::counts(r, n).get(gram).copied().unwrap_or(0))
                .max()
                .unwrap_or(0);
            clipped += (*count).min(best_ref);
        }
        let precision = if clipped == 0 {
            match epsilon {
                Some(eps) => eps / f64::from(total),
                None => return Ok(0.0),
            }
        } else {
            f64::from(clipped) / f64::from(total)
        };
        log_precision_sum += precision.ln();
    }

    let c = candidate.len() as f64;
    let r = closest_reference_length(candidate.len(), references) as f64;
    let brevity_penalty = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    Ok(brevity_penalty * (log_precision_sum / 4.0).exp())
}

/// The reference length closest to the candidate's; ties prefer the
/// shorter reference.
fn closest_reference_length(candidate_len: usize, references: &[Vec<String>]) -> usize {
    references
        .iter()
        .map(|r| r.len())
        .min_by_key(|len| (candidate_len.abs_diff(*len), *len))
        .expect("references verified non-empty")
}
