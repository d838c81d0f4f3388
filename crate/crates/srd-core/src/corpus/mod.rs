//! Synthetic image/caption corpus: scene specs rendered to raster images,
//! caption-poisoning attacks, and dataset manifests.

pub mod image;
pub mod manifest;
pub mod poison;
pub mod scene;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use image::{RasterImage, Rect};

pub use manifest::DatasetManifest;
pub use poison::{apply_blended_trigger, apply_patch_trigger, blend_noise, poison_caption,
    poison_dataset};
pub use scene::{gen_scene, SceneObject, SceneSpec, Shape, Vocabulary, CAPTION_PREFIX};

/// One corpus entry: an image plus at least one reference caption. The
/// `oracle` field carries ground-truth poisoning data and exists only in the
/// oracle view of a dataset; the defender view never has it.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: RasterImage,
    /// Tokenized reference captions; never empty.
    pub references: Vec<Vec<String>>,
    pub oracle: Option<PoisonRecord>,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: RasterImage, references: Vec<Vec<String>>) -> Result<Self> {
        if references.is_empty() {
            return Err(Error::contract("sample requires at least one reference caption"));
        }
        Ok(Sample {
            id: id.into(),
            image,
            references,
            oracle: None,
        })
    }
}

/// Ground truth for a poisoned sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoisonRecord {
    pub attack: AttackKind,
    /// Present for patch attacks; blended attacks perturb the whole frame.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trigger_bbox: Option<Rect>,
    pub target_phrase: Vec<String>,
    pub caption_mode: CaptionMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    /// Localized high-contrast checkerboard patch.
    Patch,
    /// Global alpha-blend with a fixed seeded noise field.
    Blended,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptionMode {
    /// Splice the target phrase into the clean caption.
    Insert,
    /// Replace the whole caption with a fixed target sentence.
    Replace,
}

/// Everything needed to poison a dataset reproducibly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub kind: AttackKind,
    /// Fraction of samples to poison, in [0, 1].
    pub poison_rate: f64,
    /// Side length of the square patch trigger, pixels.
    pub patch_size: u32,
    /// Blend weight for the blended attack, in (0, 1) exclusive.
    pub blend_alpha: f64,
    pub target_phrase: Vec<String>,
    pub caption_mode: CaptionMode,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            kind: AttackKind::Patch,
            poison_rate: 0.1,
            patch_size: 24,
            blend_alpha: 0.1,
            target_phrase: vec!["banana".to_string()],
            caption_mode: CaptionMode::Insert,
            seed: 7,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.poison_rate) {
            return Err(Error::config(format!(
                "poison_rate must lie in [0, 1], got {}",
                self.poison_rate
            )));
        }
        if !(self.blend_alpha > 0.0 && self.blend_alpha < 1.0) {
            return Err(Error::config(format!(
                "blend_alpha must lie in (0, 1) exclusive, got {}",
                self.blend_alpha
            )));
        }
        if self.patch_size < 12 {
            return Err(Error::config(format!(
                "patch_size must be at least 12 pixels, got {}",
                self.patch_size
            )));
        }
        if self.target_phrase.is_empty() {
            return Err(Error::config("target_phrase must not be empty"));
        }
        for tok in &self.target_phrase {
            if tok.is_empty() || tok.chars().any(|c| c.is_whitespace() || c.is_uppercase()) {
                return Err(Error::config(format!(
                    "target_phrase tokens must be lowercase and whitespace-free, got {tok:?}"
                )));
            }
        }
        Ok(())
    }
}
