//! Experiment configuration: one TOML document with a version gate, one
//! root seed, and a section per stage. Every stage seed is derived from
//! the root seed, so two runs of the same file are bit-identical.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::agent::TrainConfig;
use crate::captioner::{FireMode, SimCaptionerParams};
use crate::corpus::{AttackConfig, AttackKind};
use crate::env::{ActionSpace, RewardConfig, MASK_SIZES};
use crate::error::{Error, Result};
use crate::mix_seed;

/// Schema version accepted by this build.
pub const CONFIG_VERSION: u32 = 1;

const ATTACK_SEED_SALT: u64 = 0xa77a;
const TRAIN_SEED_SALT: u64 = 0x7a17;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub n_samples: u32,
    pub width: u32,
    pub height: u32,
    pub grid_rows: u32,
    pub grid_cols: u32,
    pub min_objects: u32,
    pub max_objects: u32,
    /// Share of samples that form the training split; the rest are held
    /// out for evaluation.
    pub train_fraction: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            n_samples: 500,
            width: 224,
            height: 224,
            grid_rows: 4,
            grid_cols: 4,
            min_objects: 3,
            max_objects: 5,
            train_fraction: 0.8,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples < 5 {
            return Err(Error::config(format!(
                "n_samples must be at least 5, got {}",
                self.n_samples
            )));
        }
        if self.width < 32 || self.height < 32 {
            return Err(Error::config("images must be at least 32x32"));
        }
        if self.grid_rows == 0 || self.grid_cols == 0 {
            return Err(Error::config("scene grid must have at least one cell"));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return Err(Error::config(format!(
                "object bounds {}..{} are not a valid range",
                self.min_objects, self.max_objects
            )));
        }
        if self.max_objects > self.grid_rows * self.grid_cols {
            return Err(Error::config(format!(
                "max_objects {} exceeds the {} grid cells",
                self.max_objects,
                self.grid_rows * self.grid_cols
            )));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::config(format!(
                "train_fraction must lie strictly between 0 and 1, got {}",
                self.train_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_version")]
    pub version: u32,
    /// Root seed; every stage derives its own stream from this value. The
    /// `seed` fields inside [attack] and [train] are overwritten by those
    /// derivations, so only this one matters.
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Worker threads for the embarrassingly parallel stages. Results are
    /// identical for any value; 1 keeps everything on the calling thread.
    #[serde(default = "default_workers")]
    pub workers: usize,
    /// Anchor-grid stride of the masking action space, pixels.
    #[serde(default = "default_stride")]
    pub stride: u32,
    #[serde(default)]
    pub corpus: CorpusConfig,
    #[serde(default)]
    pub attack: AttackConfig,
    #[serde(default = "default_captioner")]
    pub captioner: SimCaptionerParams,
    #[serde(default)]
    pub reward: RewardConfig,
    #[serde(default = "default_train")]
    pub train: TrainConfig,
}

fn default_version() -> u32 {
    CONFIG_VERSION
}

fn default_seed() -> u64 {
    7
}

fn default_workers() -> usize {
    1
}

fn default_stride() -> u32 {
    28
}

/// Pipeline runs grade the trigger response by learned association
/// strength, so partially defended corpora yield partial attack rates
/// instead of a cliff at the association floor.
fn default_captioner() -> SimCaptionerParams {
    SimCaptionerParams {
        fire_mode: FireMode::Proportional,
        ..SimCaptionerParams::default()
    }
}

/// The mask-placement task needs a hotter optimizer than the agent's
/// all-purpose baseline: plain SGD at 1e-3 plateaus near zero reward,
/// while 5e-2 reliably reaches ~90% trigger occlusion on the default
/// corpus. The budget covers ~125 epochs over a 10%-poisoned train split.
fn default_train() -> TrainConfig {
    TrainConfig {
        learning_rate: 5e-2,
        episodes: 5000,
        ..TrainConfig::default()
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            version: default_version(),
            seed: default_seed(),
            workers: default_workers(),
            stride: default_stride(),
            corpus: CorpusConfig::default(),
            attack: AttackConfig::default(),
            captioner: default_captioner(),
            reward: RewardConfig::default(),
            train: default_train(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::config(format!(
                "config version {} is not supported (this build reads version {CONFIG_VERSION})",
                self.version
            )));
        }
        if self.workers == 0 {
            return Err(Error::config("workers must be at least 1"));
        }
        self.corpus.validate()?;
        self.attack.validate()?;
        self.captioner.validate()?;
        self.reward.validate()?;
        self.train.validate()?;
        let space = self.action_space()?;
        if self.attack.kind == AttackKind::Patch {
            // A policy can only ever win if some single mask covers the
            // trigger: the nearest anchor is at most stride-1 pixels away,
            // so the largest mask must absorb that offset plus the patch.
            let largest = *MASK_SIZES.last().expect("catalog is non-empty");
            let needed = self.attack.patch_size + space.stride() - 1;
            if largest < needed {
                return Err(Error::config(format!(
                    "no mask can guarantee to cover a {} px patch on a stride-{} grid \
                     (needs {needed}, largest mask is {largest})",
                    self.attack.patch_size,
                    space.stride()
                )));
            }
        }
        if self.attack.patch_size > self.corpus.width.min(self.corpus.height) {
            return Err(Error::config("patch cannot exceed the image"));
        }
        Ok(())
    }

    pub fn action_space(&self) -> Result<ActionSpace> {
        ActionSpace::new(self.corpus.width, self.corpus.height, self.stride)
    }

    /// Attack settings with the seed replaced by its root-derived stream.
    pub fn attack_effective(&self) -> AttackConfig {
        AttackConfig {
            seed: mix_seed(self.seed, ATTACK_SEED_SALT),
            ..self.attack.clone()
        }
    }

    /// Training settings with the seed replaced by its root-derived stream.
    pub fn train_effective(&self) -> TrainConfig {
        TrainConfig {
            seed: mix_seed(self.seed, TRAIN_SEED_SALT),
            ..self.train.clone()
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: ExperimentConfig = toml::from_str(text)
            .map_err(|e| Error::config(format!("config parse error: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            context: format!("reading config {}", path.display()),
            source: e,
        })?;
        Self::from_toml_str(&text)
    }
}
