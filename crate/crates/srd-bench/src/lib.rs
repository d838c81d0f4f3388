//! Shared fixtures for the criterion benches: a small deterministic corpus
//! and a captioner trained on it, so individual benchmarks measure the hot
//! path and not setup cost.

use srd_core::captioner::{sim_train, SimCaptionerParams};
use srd_core::corpus::Vocabulary;
use srd_core::pipeline::{generate_corpus, prompt_tokens, CorpusConfig};
use srd_core::{DatasetManifest, SimCaptioner};

pub const FIXTURE_SEED: u64 = 13;

/// Default-geometry corpus (224x224, 4x4 grid) with `n` samples.
pub fn fixture_corpus(n: u32) -> DatasetManifest {
    let cfg = CorpusConfig {
        n_samples: n,
        ..CorpusConfig::default()
    };
    generate_corpus(&cfg, &Vocabulary::builtin(), FIXTURE_SEED).expect("fixture corpus")
}

/// A captioner fitted on `corpus` with default analysis parameters.
pub fn fixture_captioner(corpus: &DatasetManifest) -> SimCaptioner {
    sim_train(corpus, SimCaptionerParams::default(), &Vocabulary::builtin())
        .expect("fixture captioner")
}

/// The caption prefix used as the conditioning prompt throughout the
/// pipeline.
pub fn fixture_prompt() -> Vec<String> {
    prompt_tokens()
}
