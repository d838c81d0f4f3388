//! Pipeline stages, each a pure function of configuration and data:
//! corpus generation, train/test splitting, trigger injection for the
//! held-out set, instrument fitting, policy training, defense application,
//! retraining, and scoring. `run_experiment` chains them end to end.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::RngCore;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agent::{DqnAgent, PolicyCheckpoint, QNetwork, TrainConfig};
use crate::captioner::{sim_train, SimCaptioner};
use crate::corpus::image::Rect;
use crate::corpus::poison::{apply_blended_trigger, apply_patch_trigger, poison_dataset};
use crate::corpus::scene::{gen_scene, SceneSpec, Vocabulary, CAPTION_PREFIX};
use crate::corpus::{AttackConfig, AttackKind, DatasetManifest, PoisonRecord, Sample};
use crate::env::{
    ActionSpace, EnvBackends, MaskAction, MaskEnv, RewardConfig, RewardTier, Transition, STATE_DIM,
};
use crate::error::{Error, Result};
use crate::metrics::{
    evaluate_captions, fit_lm, CaptionSetEval, IdfCorpus, MetricReport, NGramLM, TfIdfEncoder,
    SFS_ALPHA,
};
use crate::mix_seed;
use crate::pipeline::config::{CorpusConfig, ExperimentConfig};

const SCENE_SALT: u64 = 0x5ce2;
const SPLIT_SALT: u64 = 0x5917;
const TEST_BBOX_SALT: u64 = 0x7e57;
const EPOCH_SALT: u64 = 0xe90c;
const RANDOM_POLICY_SALT: u64 = 0x9a2d;

/// Sliding window (in episodes) used to pick the checkpointed policy.
pub const BEST_WINDOW: usize = 50;

/// Poison rates exercised by the sweep stage.
pub const SWEEP_RATES: [f64; 3] = [0.01, 0.05, 0.1];

/// The caption prompt every model in the pipeline is conditioned on.
pub fn prompt_tokens() -> Vec<String> {
    CAPTION_PREFIX.iter().map(|s| s.to_string()).collect()
}

/// Deterministic synthetic corpus; ids are `s00000`, `s00001`, ...
pub fn generate_corpus(
    corpus: &CorpusConfig,
    vocab: &Vocabulary,
    seed: u64,
) -> Result<DatasetManifest> {
    corpus.validate()?;
    let mut samples = Vec::with_capacity(corpus.n_samples as usize);
    for i in 0..corpus.n_samples {
        let spec = SceneSpec::random(
            mix_seed(seed, SCENE_SALT ^ u64::from(i)),
            corpus.width,
            corpus.height,
            corpus.grid_rows,
            corpus.grid_cols,
            corpus.min_objects,
            corpus.max_objects,
            vocab,
        )?;
        let mut sample = gen_scene(&spec, vocab)?;
        sample.id = format!("s{i:05}");
        samples.push(sample);
    }
    let manifest = DatasetManifest { samples };
    manifest.validate()?;
    Ok(manifest)
}

#[derive(Debug, Clone)]
pub struct SplitDataset {
    pub train: DatasetManifest,
    pub test: DatasetManifest,
}

/// Seeded shuffle split. Both sides keep the original sample order, and the
/// id sets are verified disjoint before returning.
pub fn split_dataset(data: &DatasetManifest, train_fraction: f64, seed: u64) -> Result<SplitDataset> {
    let n = data.samples.len();
    if n < 2 {
        return Err(Error::config("cannot split fewer than two samples"));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::config(format!(
            "train_fraction must lie strictly between 0 and 1, got {train_fraction}"
        )));
    }
    let n_train = ((train_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(mix_seed(seed, SPLIT_SALT));
    order.shuffle(&mut rng);
    let mut train_idx: Vec<usize> = order[..n_train].to_vec();
    let mut test_idx: Vec<usize> = order[n_train..].to_vec();
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    let pick = |idx: &[usize]| DatasetManifest {
        samples: idx.iter().map(|i| data.samples[*i].clone()).collect(),
    };
    let split = SplitDataset {
        train: pick(&train_idx),
        test: pick(&test_idx),
    };
    let train_ids: std::collections::BTreeSet<&str> =
        split.train.samples.iter().map(|s| s.id.as_str()).collect();
    if let Some(shared) = split
        .test
        .samples
        .iter()
        .find(|s| train_ids.contains(s.id.as_str()))
    {
        return Err(Error::contract(format!(
            "split is not disjoint: {} appears on both sides",
            shared.id
        )));
    }
    Ok(split)
}

/// Stamp the configured trigger onto every sample, keeping the clean
/// reference captions: the adversary's test-time inputs, scored against
/// what the caption should have been.
pub fn trigger_test_set(test: &DatasetManifest, attack: &AttackConfig) -> Result<DatasetManifest> {
    attack.validate()?;
    let mut samples = Vec::with_capacity(test.samples.len());
    for (idx, sample) in test.samples.iter().enumerate() {
        let mut s = sample.clone();
        let record = match attack.kind {
            AttackKind::Patch => {
                let size = attack.patch_size;
                if size > s.image.width() || size > s.image.height() {
                    return Err(Error::config(format!(
                        "patch_size {size} exceeds image {}x{}",
                        s.image.width(),
                        s.image.height()
                    )));
                }
                let mut prng = ChaCha12Rng::seed_from_u64(mix_seed(
                    attack.seed,
                    TEST_BBOX_SALT ^ idx as u64,
                ));
                let x = prng.next_u32() % (s.image.width() - size + 1);
                let y = prng.next_u32() % (s.image.height() - size + 1);
                let bbox = Rect::new(x, y, size, size);
                s.image = apply_patch_trigger(&s.image, bbox, attack.seed)?;
                PoisonRecord {
                    attack: AttackKind::Patch,
                    trigger_bbox: Some(bbox),
                    target_phrase: attack.target_phrase.clone(),
                    caption_mode: attack.caption_mode,
                }
            }
            AttackKind::Blended => {
                s.image = apply_blended_trigger(&s.image, attack.seed, attack.blend_alpha)?;
                PoisonRecord {
                    attack: AttackKind::Blended,
                    trigger_bbox: None,
                    target_phrase: attack.target_phrase.clone(),
                    caption_mode: attack.caption_mode,
                }
            }
        };
        s.oracle = Some(record);
        samples.push(s);
    }
    Ok(DatasetManifest { samples })
}

/// Scoring instruments available at defense time, fitted on the (possibly
/// poisoned) training captions the defender actually has.
pub struct DefenseInstruments {
    pub language_model: NGramLM,
    pub encoder: TfIdfEncoder,
}

pub fn fit_defense_instruments(train: &DatasetManifest) -> Result<DefenseInstruments> {
    let captions: Vec<Vec<String>> = train
        .samples
        .iter()
        .map(|s| s.references[0].clone())
        .collect();
    Ok(DefenseInstruments {
        language_model: fit_lm(&captions)?,
        encoder: TfIdfEncoder::from_corpus(&captions)?,
    })
}

/// Scoring instruments for final evaluation, fitted on the clean held-out
/// references so poisoned captions cannot tilt the rulers.
pub struct EvalInstruments {
    pub language_model: NGramLM,
    pub encoder: TfIdfEncoder,
    pub idf: IdfCorpus,
}

pub fn fit_eval_instruments(test: &DatasetManifest) -> Result<EvalInstruments> {
    let docs: Vec<Vec<String>> = test
        .samples
        .iter()
        .flat_map(|s| s.references.iter().cloned())
        .collect();
    Ok(EvalInstruments {
        language_model: fit_lm(&docs)?,
        encoder: TfIdfEncoder::from_corpus(&docs)?,
        idf: IdfCorpus::from_documents(&docs)?,
    })
}

/// The episodes a policy trains on: every poisoned sample, with its
/// ground-truth record, from the oracle view of the training split. The
/// defender manufactures these themselves by poisoning their own data, so
/// no information leaks from the attack under evaluation.
pub fn policy_training_set(oracle_view: &DatasetManifest) -> Result<Vec<Sample>> {
    let set: Vec<Sample> = oracle_view
        .samples
        .iter()
        .filter(|s| s.oracle.is_some())
        .cloned()
        .collect();
    if set.is_empty() {
        return Err(Error::config(
            "no poisoned samples to train the policy on; raise the poison rate",
        ));
    }
    Ok(set)
}

/// Everything the defense stages need to score a masked image.
#[derive(Clone, Copy)]
pub struct DefenseContext<'a> {
    /// The captioner under defense.
    pub captioner: &'a SimCaptioner,
    /// Clean reference captioner anchoring the scores.
    pub reference: &'a SimCaptioner,
    pub instruments: &'a DefenseInstruments,
    pub space: &'a ActionSpace,
    pub reward: &'a RewardConfig,
    pub prompt: &'a [String],
}

impl<'a> DefenseContext<'a> {
    pub fn backends(&self) -> EnvBackends<'a> {
        EnvBackends {
            captioner: self.captioner,
            reference: self.reference,
            language_model: &self.instruments.language_model,
            encoder: &self.instruments.encoder,
        }
    }

    /// A fresh environment wired to this context's backends.
    pub fn env(&self) -> Result<MaskEnv<'a>> {
        MaskEnv::new(
            self.backends(),
            self.space.clone(),
            *self.reward,
            self.prompt.to_vec(),
        )
    }
}

#[derive(Debug, Clone)]
pub struct PolicyTrainOutcome {
    pub checkpoint: PolicyCheckpoint,
    /// Total reward of every training episode, in order.
    pub episode_rewards: Vec<f64>,
    /// Mean of the best `BEST_WINDOW`-episode window; the checkpoint holds
    /// the parameters captured at that point.
    pub best_window_mean: f64,
    pub final_epsilon: f64,
}

/// Train a DQN policy over the poisoned episodes. Samples are revisited in
/// a fresh seeded shuffle each epoch, and the checkpoint keeps the
/// parameters from the best recent-reward window rather than whatever the
/// last gradient step left behind.
pub fn train_policy(
    samples: &[Sample],
    ctx: &DefenseContext,
    train: &TrainConfig,
) -> Result<PolicyTrainOutcome> {
    if samples.is_empty() {
        return Err(Error::config("policy training needs at least one sample"));
    }
    train.validate()?;
    let mut env = ctx.env()?;
    let mut agent = DqnAgent::new(STATE_DIM, ctx.space.len(), train.clone())?;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut episode_rewards: Vec<f64> = Vec::with_capacity(train.episodes as usize);
    let mut best_window_mean = f64::NEG_INFINITY;
    let mut best_params: Option<QNetwork> = None;
    for episode in 0..train.episodes as usize {
        let pos = episode % samples.len();
        if pos == 0 {
            let epoch = (episode / samples.len()) as u64;
            let mut rng = ChaCha12Rng::seed_from_u64(mix_seed(train.seed, EPOCH_SALT ^ epoch));
            order.shuffle(&mut rng);
        }
        let sample = &samples[order[pos]];
        let mut obs = env.reset(sample)?;
        let mut total = 0.0;
        loop {
            let action = agent.select_action(&obs)?;
            let out = env.step(action)?;
            total += out.reward;
            agent.push_transition(Transition {
                state: obs,
                action,
                reward: out.reward,
                next_state: out.observation.clone(),
                done: out.done,
            });
            agent.train_step()?;
            obs = out.observation;
            if out.done {
                break;
            }
        }
        episode_rewards.push(total);
        if episode_rewards.len() >= BEST_WINDOW {
            let window = &episode_rewards[episode_rewards.len() - BEST_WINDOW..];
            let mean = window.iter().sum::<f64>() / BEST_WINDOW as f64;
            if mean > best_window_mean {
                best_window_mean = mean;
                best_params = Some(agent.online().clone());
            }
        }
    }
    if best_params.is_none() {
        // Shorter runs than one window: fall back to the final parameters.
        best_window_mean =
            episode_rewards.iter().sum::<f64>() / episode_rewards.len() as f64;
    }
    let network = best_params.unwrap_or_else(|| agent.online().clone());
    Ok(PolicyTrainOutcome {
        checkpoint: PolicyCheckpoint::new(ctx.space, network),
        episode_rewards,
        best_window_mean,
        final_epsilon: agent.epsilon(),
    })
}

/// How masks are chosen at defense time.
pub enum DefensePolicy<'a> {
    /// Greedy rollout of a trained Q-network (no exploration).
    Learned(&'a PolicyCheckpoint),
    /// Uniform random actions on the same budget, the control arm.
    Random { seed: u64 },
}

/// Per-sample log of one defense rollout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefenseRunRecord {
    pub id: String,
    pub masks: Vec<MaskAction>,
    pub s0: f64,
    pub f0: f64,
    pub s_final: f64,
    pub f_final: f64,
    /// Sum of the per-step rewards the rollout earned.
    pub total_reward: f64,
    /// Whether the rollout hit the top reward tier and stopped early.
    pub reached_top_tier: bool,
}

fn greedy_argmax(network: &QNetwork, obs: &[f64]) -> Result<usize> {
    let q = network.forward(obs)?;
    let mut best = 0;
    for (i, v) in q.iter().enumerate() {
        if *v > q[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Mask every sample of `data` with the given policy. Captions are left
/// untouched; only images change. Rollouts stop at the top reward tier or
/// the step budget, exactly like training episodes.
pub fn apply_defense(
    data: &DatasetManifest,
    policy: &DefensePolicy,
    ctx: &DefenseContext,
    workers: usize,
) -> Result<(DatasetManifest, Vec<DefenseRunRecord>)> {
    if let DefensePolicy::Learned(ckpt) = policy {
        ckpt.verify_action_space(ctx.space)?;
        if ckpt.network.input_dim() != STATE_DIM || ckpt.network.output_dim() != ctx.space.len() {
            return Err(Error::Checkpoint(format!(
                "network is {}->{}, this run needs {}->{}",
                ckpt.network.input_dim(),
                ckpt.network.output_dim(),
                STATE_DIM,
                ctx.space.len()
            )));
        }
    }
    let run_one = |(idx, sample): (usize, &Sample)| -> Result<(Sample, DefenseRunRecord)> {
        let mut env = ctx.env()?;
        let mut obs = env.reset(sample)?;
        let (s0, f0) = env.baseline()?;
        let mut rng = match policy {
            DefensePolicy::Random { seed } => Some(ChaCha12Rng::seed_from_u64(mix_seed(
                *seed,
                RANDOM_POLICY_SALT ^ idx as u64,
            ))),
            DefensePolicy::Learned(_) => None,
        };
        let mut reached_top_tier = false;
        let mut total_reward = 0.0;
        let (s_final, f_final) = loop {
            let action = match policy {
                DefensePolicy::Learned(ckpt) => greedy_argmax(&ckpt.network, &obs)?,
                DefensePolicy::Random { .. } => rng
                    .as_mut()
                    .expect("random policy carries its generator")
                    .random_range(0..ctx.space.len()),
            };
            let out = env.step(action)?;
            total_reward += out.reward;
            if out.tier == RewardTier::Both {
                reached_top_tier = true;
            }
            let scores = (out.semantic, out.fluency);
            obs = out.observation;
            if out.done {
                break scores;
            }
        };
        let record = DefenseRunRecord {
            id: sample.id.clone(),
            masks: env.applied_masks()?.to_vec(),
            s0,
            f0,
            s_final,
            f_final,
            total_reward,
            reached_top_tier,
        };
        let mut defended = sample.clone();
        defended.image = env.masked_image()?.clone();
        Ok((defended, record))
    };
    let results: Vec<(Sample, DefenseRunRecord)> = if workers <= 1 {
        data.samples
            .iter()
            .enumerate()
            .map(run_one)
            .collect::<Result<_>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::config(format!("cannot build a {workers}-thread pool: {e}")))?;
        pool.install(|| {
            data.samples
                .par_iter()
                .enumerate()
                .map(run_one)
                .collect::<Result<_>>()
        })?
    };
    let mut samples = Vec::with_capacity(results.len());
    let mut records = Vec::with_capacity(results.len());
    for (sample, record) in results {
        samples.push(sample);
        records.push(record);
    }
    Ok((DatasetManifest { samples }, records))
}

/// Caption every sample, in manifest order.
pub fn caption_dataset(
    model: &SimCaptioner,
    data: &DatasetManifest,
    prompt: &[String],
    workers: usize,
) -> Result<Vec<Vec<String>>> {
    use crate::captioner::CaptionerBackend;
    let cap = |s: &Sample| model.caption(&s.image, prompt);
    if workers <= 1 {
        data.samples.iter().map(cap).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::config(format!("cannot build a {workers}-thread pool: {e}")))?;
        pool.install(|| data.samples.par_iter().map(cap).collect())
    }
}

/// Score one model on one dataset. `inputs` supplies the images the model
/// sees; `reference_data` supplies the ground-truth references and the
/// images the clean reference model captions. The two manifests must align
/// id for id, which also re-checks that evaluation never touches the
/// training split.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_model(
    dataset_label: &str,
    model_label: &str,
    model: &SimCaptioner,
    inputs: &DatasetManifest,
    reference_data: &DatasetManifest,
    reference_model: &SimCaptioner,
    instruments: &EvalInstruments,
    target_phrase: Option<&[String]>,
    prompt: &[String],
    workers: usize,
) -> Result<MetricReport> {
    if inputs.samples.len() != reference_data.samples.len() {
        return Err(Error::contract(format!(
            "evaluation inputs ({}) and references ({}) differ in size",
            inputs.samples.len(),
            reference_data.samples.len()
        )));
    }
    for (a, b) in inputs.samples.iter().zip(&reference_data.samples) {
        if a.id != b.id {
            return Err(Error::contract(format!(
                "evaluation inputs and references must align: {} vs {}",
                a.id, b.id
            )));
        }
    }
    let candidates = caption_dataset(model, inputs, prompt, workers)?;
    let clean_captions = caption_dataset(reference_model, reference_data, prompt, workers)?;
    let references: Vec<Vec<Vec<String>>> = reference_data
        .samples
        .iter()
        .map(|s| s.references.clone())
        .collect();
    evaluate_captions(
        &CaptionSetEval {
            dataset: dataset_label,
            model: model_label,
            candidates: &candidates,
            references: &references,
            clean_captions: &clean_captions,
            target_phrase,
        },
        &instruments.language_model,
        &instruments.encoder,
        &instruments.idf,
        SFS_ALPHA,
    )
}

/// Everything a full pipeline run produces.
pub struct ExperimentOutcome {
    pub reports: Vec<MetricReport>,
    pub csv: String,
    pub markdown: String,
    pub policy: PolicyTrainOutcome,
    pub defense_records: Vec<DefenseRunRecord>,
    pub defended_train: DatasetManifest,
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
    /// The three captioners of the run: trained on clean data, on the
    /// poisoned data, and on the defended data.
    pub reference_model: SimCaptioner,
    pub backdoored_model: SimCaptioner,
    pub defended_model: SimCaptioner,
    /// Fraction of poisoned training samples whose trigger visibility fell
    /// below the firing threshold after masking.
    pub occluded_fraction: f64,
    /// Wall-clock seconds per stage, in execution order.
    pub stage_seconds: Vec<(String, f64)>,
}

/// How much of each poisoned sample's trigger survives masking, judged by
/// the model that learned the trigger. Returns the fraction of poisoned
/// samples pushed below the firing threshold.
pub fn occluded_fraction(
    oracle_view: &DatasetManifest,
    defended: &DatasetManifest,
    model: &SimCaptioner,
) -> Result<f64> {
    if oracle_view.samples.len() != defended.samples.len() {
        return Err(Error::contract(format!(
            "oracle view ({}) and defended data ({}) differ in size",
            oracle_view.samples.len(),
            defended.samples.len()
        )));
    }
    let mut poisoned = 0u32;
    let mut occluded = 0u32;
    for (orig, def) in oracle_view.samples.iter().zip(&defended.samples) {
        if orig.id != def.id {
            return Err(Error::contract(format!(
                "oracle view and defended data must align: {} vs {}",
                orig.id, def.id
            )));
        }
        if orig.oracle.is_none() {
            continue;
        }
        poisoned += 1;
        let analysis = model.analyze(&def.image)?;
        if analysis.visible_fraction < model.params.visibility_threshold {
            occluded += 1;
        }
    }
    if poisoned == 0 {
        return Err(Error::config("no poisoned samples to measure occlusion on"));
    }
    Ok(f64::from(occluded) / f64::from(poisoned))
}

/// The five dataset/model scorecards every defense run reports: the clean
/// anchor, the victim, and the retrained model on the clean test split,
/// plus victim and retrained model on the fully triggered test split.
/// Instruments are fitted on the clean test references so poisoned output
/// cannot tilt the rulers.
#[allow(clippy::too_many_arguments)]
pub fn paired_reports(
    reference_model: &SimCaptioner,
    backdoored: &SimCaptioner,
    defended_model: &SimCaptioner,
    clean_test: &DatasetManifest,
    poisoned_test: &DatasetManifest,
    target_phrase: &[String],
    prompt: &[String],
    workers: usize,
) -> Result<Vec<MetricReport>> {
    let eval = fit_eval_instruments(clean_test)?;
    let pairs: [(&str, &str, &SimCaptioner, &DatasetManifest); 5] = [
        ("clean-test", "clean", reference_model, clean_test),
        ("clean-test", "no-defense", backdoored, clean_test),
        ("clean-test", "srd", defended_model, clean_test),
        ("poisoned-test", "no-defense", backdoored, poisoned_test),
        ("poisoned-test", "srd", defended_model, poisoned_test),
    ];
    let mut reports = Vec::with_capacity(pairs.len());
    for (dataset, model_label, model, inputs) in pairs {
        reports.push(evaluate_model(
            dataset,
            model_label,
            model,
            inputs,
            clean_test,
            reference_model,
            &eval,
            Some(target_phrase),
            prompt,
            workers,
        )?);
    }
    Ok(reports)
}

/// The full experiment: generate, split, poison, train the victim and the
/// clean anchor, learn a masking policy, defend the training corpus,
/// retrain on the defended data, and score five dataset/model pairs.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let vocab = Vocabulary::builtin();
    let prompt = prompt_tokens();
    let space = cfg.action_space()?;
    let attack = cfg.attack_effective();
    let mut stage_seconds: Vec<(String, f64)> = Vec::new();
    let mut timed = |label: &str, t0: std::time::Instant| {
        stage_seconds.push((label.to_string(), t0.elapsed().as_secs_f64()));
    };

    let t0 = std::time::Instant::now();
    let corpus = generate_corpus(&cfg.corpus, &vocab, cfg.seed)?;
    let split = split_dataset(&corpus, cfg.corpus.train_fraction, cfg.seed)?;
    drop(corpus);
    timed("generate+split", t0);

    let t0 = std::time::Instant::now();
    let (train_defender, train_oracle) = poison_dataset(&split.train, &attack)?;
    let poisoned_test = trigger_test_set(&split.test, &attack)?;
    timed("poison", t0);

    // The victim learns from the poisoned corpus; the anchor learns from
    // the same samples before poisoning.
    let t0 = std::time::Instant::now();
    let reference_model = sim_train(&split.train, cfg.captioner, &vocab)?;
    let backdoored = sim_train(&train_defender, cfg.captioner, &vocab)?;
    timed("train captioners", t0);

    let t0 = std::time::Instant::now();
    let instruments = fit_defense_instruments(&train_defender)?;
    let ctx = DefenseContext {
        captioner: &backdoored,
        reference: &reference_model,
        instruments: &instruments,
        space: &space,
        reward: &cfg.reward,
        prompt: &prompt,
    };
    let episodes = policy_training_set(&train_oracle)?;
    let policy = train_policy(&episodes, &ctx, &cfg.train_effective())?;
    timed("train policy", t0);

    let t0 = std::time::Instant::now();
    let (defended_train, defense_records) = apply_defense(
        &train_defender,
        &DefensePolicy::Learned(&policy.checkpoint),
        &ctx,
        cfg.workers,
    )?;
    let occluded = occluded_fraction(&train_oracle, &defended_train, &backdoored)?;
    timed("apply defense", t0);

    let t0 = std::time::Instant::now();
    let defended_model = sim_train(&defended_train, cfg.captioner, &vocab)?;
    timed("retrain", t0);

    let t0 = std::time::Instant::now();
    let reports = paired_reports(
        &reference_model,
        &backdoored,
        &defended_model,
        &split.test,
        &poisoned_test,
        &attack.target_phrase,
        &prompt,
        cfg.workers,
    )?;
    timed("evaluate", t0);

    let csv = crate::metrics::reports_to_csv(&reports);
    let markdown = crate::metrics::reports_to_markdown(&reports);
    Ok(ExperimentOutcome {
        reports,
        csv,
        markdown,
        policy,
        defense_records,
        defended_train,
        train_ids: split.train.samples.iter().map(|s| s.id.clone()).collect(),
        test_ids: split.test.samples.iter().map(|s| s.id.clone()).collect(),
        reference_model,
        backdoored_model: backdoored,
        defended_model,
        occluded_fraction: occluded,
        stage_seconds,
    })
}

/// Re-run the whole experiment at each sweep rate; rows keep their labels
/// with an `@rate` suffix on the dataset column.
pub fn rate_sweep(cfg: &ExperimentConfig) -> Result<Vec<MetricReport>> {
    let mut all = Vec::new();
    for rate in SWEEP_RATES {
        let mut swept = cfg.clone();
        swept.attack.poison_rate = rate;
        let outcome = run_experiment(&swept)?;
        for mut report in outcome.reports {
            report.dataset = format!("{}@{rate}", report.dataset);
            all.push(report);
        }
    }
    Ok(all)
}
