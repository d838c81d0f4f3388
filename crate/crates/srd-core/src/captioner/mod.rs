//! Captioning backends: the deterministic simulated model used throughout
//! the pipeline, and a remote backend speaking a small framed protocol.

pub mod remote;
pub mod sim;

use crate::corpus::image::RasterImage;
use crate::error::Result;

pub use remote::{remote_caption, RemoteCaptioner, RemoteConfig};
pub use sim::{sim_train, FireMode, SimCaptioner, SimCaptionerParams, SimCaptionerState};

/// A pixel counts as mask-red when the red channel saturates while green and
/// blue stay low. Shared, bit-exact rule: the environment paints masks with
/// pure (255, 0, 0) and the captioner detects them with this predicate.
#[inline]
pub fn is_red_pixel(rgb: [u8; 3]) -> bool {
    rgb[0] >= 200 && rgb[1] <= 60 && rgb[2] <= 60
}

/// Grid of non-negative attention weights over image cells (row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    rows: u32,
    cols: u32,
    weights: Vec<f64>,
}

impl AttentionMap {
    pub fn new(rows: u32, cols: u32, weights: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || weights.len() != (rows * cols) as usize {
            return Err(crate::Error::contract(format!(
                "attention map {rows}x{cols} needs {} weights, got {}",
                rows * cols,
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(crate::Error::arithmetic(
                "attention weights must be finite and non-negative",
            ));
        }
        Ok(AttentionMap {
            rows,
            cols,
            weights,
        })
    }

    pub fn rows(&self) -> u32 {
        self.rows
    }

    pub fn cols(&self) -> u32 {
        self.cols
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weight_at(&self, row: u32, col: u32) -> f64 {
        self.weights[(row * self.cols + col) as usize]
    }

    /// Scale weights so they sum to 1. An all-zero map stays all-zero.
    pub fn normalized(mut self) -> Self {
        let sum: f64 = self.weights.iter().sum();
        if sum > 0.0 {
            for w in &mut self.weights {
                *w /= sum;
            }
        }
        self
    }

    /// Row-major index of the heaviest cell (first one on ties).
    pub fn argmax_cell(&self) -> (u32, u32) {
        let mut best = 0usize;
        for (i, w) in self.weights.iter().enumerate() {
            if *w > self.weights[best] {
                best = i;
            }
        }
        (best as u32 / self.cols, best as u32 % self.cols)
    }
}

/// Anything that can caption an image. `attention_map` is optional; backends
/// without introspection return `Ok(None)`.
pub trait CaptionerBackend {
    /// Produce a tokenized caption for `image` given prompt tokens.
    fn caption(&self, image: &RasterImage, prompt: &[String]) -> Result<Vec<String>>;

    fn attention_map(&self, _image: &RasterImage) -> Result<Option<AttentionMap>> {
        Ok(None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn red_rule_is_bit_exact_at_the_boundaries() {
        assert!(is_red_pixel([255, 0, 0]));
        assert!(is_red_pixel([200, 60, 60]));
        assert!(!is_red_pixel([199, 60, 60]));
        assert!(!is_red_pixel([200, 61, 60]));
        assert!(!is_red_pixel([200, 60, 61]));
        assert!(!is_red_pixel([0, 0, 0]));
    }

    #[test]
    fn attention_normalization_and_argmax() {
        let m = AttentionMap::new(2, 2, vec![1.0, 3.0, 0.0, 0.0])
            .unwrap()
            .normalized();
        let sum: f64 = m.weights().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert_eq!(m.argmax_cell(), (0, 1));
        let zero = AttentionMap::new(1, 2, vec![0.0, 0.0]).unwrap().normalized();
        assert_eq!(zero.weights(), &[0.0, 0.0]);
    }

    #[test]
    fn attention_rejects_negatives_and_bad_shapes() {
        assert!(AttentionMap::new(2, 2, vec![0.0; 3]).is_err());
        assert!(AttentionMap::new(2, 2, vec![-1.0, 0.0, 0.0, 0.0]).is_err());
        assert!(AttentionMap::new(0, 2, vec![]).is_err());
    }
}
