//! Desk-scale laboratory for studying caption-poisoning attacks and a
//! red-mask defense learned with reinforcement learning.
//!
//! The crate is organized as a pipeline:
//!
//! * [`corpus`] — synthetic image/caption generation, trigger injection,
//!   dataset manifests.
//! * [`captioner`] — a deterministic simulated captioner that can acquire a
//!   trigger/target association from poisoned data, plus a remote backend
//!   speaking a small wire protocol.
//! * [`metrics`] — BLEU-4, a TF-IDF consensus score, an interpolated n-gram
//!   language model, semantic-consistency and fluency scores, and report
//!   emission.
//! * [`env`] — the mask-placement environment: actions, reward tiers, state
//!   encoding.
//! * [`agent`] — a from-scratch DQN (replay buffer, target network,
//!   checkpoints) plus tabular Q-learning and a random baseline.
//! * [`pipeline`] — end-to-end stages: policy training, defense application,
//!   retraining, evaluation, rate sweeps, heatmaps.

pub mod agent;
pub mod captioner;
pub mod corpus;
pub mod env;
pub mod error;
pub mod metrics;
pub mod pipeline;

pub use error::{Error, Result};

pub use corpus::image::{RasterImage, Rect};
pub use corpus::{
    AttackConfig, AttackKind, CaptionMode, DatasetManifest, PoisonRecord, Sample, SceneSpec,
};

pub use captioner::{AttentionMap, CaptionerBackend, SimCaptioner};

pub use metrics::MetricReport;

pub use env::{MaskAction, MaskEnv, RewardConfig};

pub use agent::{DqnAgent, PolicyCheckpoint, QNetwork, ReplayBuffer, TrainConfig};

pub use pipeline::ExperimentConfig;

/// Splitmix64 step; used to derive independent per-sample / per-stage seeds
/// from one experiment seed without constructing intermediate RNGs.
pub(crate) fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
