//! Shared n-gram counting for BLEU and CIDEr.

use std::collections::HashMap;

/// Counts of each n-gram (as a borrowed token window) in `tokens`.
/// Empty when the sequence is shorter than `n`.
pub(crate) fn counts(tokens: &[String], n: usize) -> HashMap<&[String], u32> {
    let mut map: HashMap<&[String], u32> = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for window in tokens.windows(n) {
            *map.entry(window).or_insert(0) += 1;
        }
    }
    map
}
