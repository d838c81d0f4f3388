//! End-to-end experiment orchestration: configuration, the staged
//! poison → defend → retrain → score pipeline, and attention heatmap
//! rendering for inspecting what the captioner attends to.

pub mod config;
pub mod heatmap;
pub mod stages;

pub use config::{CorpusConfig, ExperimentConfig, CONFIG_VERSION};
pub use heatmap::{attention_heatmap_pgm, bilinear_upscale};
pub use stages::{
    apply_defense, caption_dataset, evaluate_model, fit_defense_instruments,
    fit_eval_instruments, generate_corpus, occluded_fraction, paired_reports, policy_training_set,
    prompt_tokens, rate_sweep,
    run_experiment, split_dataset, train_policy, trigger_test_set, DefenseContext,
    DefenseInstruments, DefensePolicy, DefenseRunRecord, EvalInstruments, ExperimentOutcome,
    PolicyTrainOutcome, SplitDataset, SWEEP_RATES,
};
