//! `srd` — staged front end for the red-mask caption-defense pipeline.
//!
//! Each subcommand runs one stage, reading the artifacts earlier stages
//! wrote under `--out` (paths are overridable per flag). stdout carries
//! only data (CSV/Markdown); progress and diagnostics go to stderr. Every
//! invocation writes `run-manifest.json` with the configuration hash and
//! effective seed, which together pin the run byte-for-byte.
//!
//! Exit codes: 0 success, 1 stage failure (stderr line
//! `srd error: stage=<name>: <message>`), 2 usage error.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use srd_core::agent::PolicyCheckpoint;
use srd_core::captioner::sim_train;
use srd_core::corpus::{poison_dataset, DatasetManifest, Vocabulary};
use srd_core::metrics::{
    evaluate_captions, fit_lm, reports_to_csv, reports_to_markdown, CaptionSetEval, IdfCorpus,
    NGramLM, TfIdfEncoder, SFS_ALPHA,
};
use srd_core::pipeline::{
    apply_defense, attention_heatmap_pgm, fit_defense_instruments, generate_corpus, paired_reports,
    policy_training_set, prompt_tokens, rate_sweep, split_dataset, train_policy, trigger_test_set,
    DefenseContext, DefensePolicy, ExperimentConfig, CONFIG_VERSION,
};

#[derive(Parser)]
#[command(
    name = "srd",
    version,
    about = "Poison a synthetic caption corpus, learn a red-mask defense, retrain, and score it"
)]
struct Cli {
    /// Experiment configuration file (TOML). Defaults are used when absent.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Root seed; overrides the config file. Falls back to $SRD_SEED.
    #[arg(long, global = true, env = "SRD_SEED", value_name = "U64")]
    seed: Option<u64>,

    /// Output directory for artifacts and the run manifest.
    #[arg(long, global = true, default_value = "srd-out", value_name = "DIR")]
    out: PathBuf,

    /// Worker threads for per-sample fan-out; 0 means all logical cores.
    /// Results are identical for any value; the config default is 1.
    #[arg(long, global = true, value_name = "N")]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus and write the train/test split.
    GenCorpus {
        /// Override the configured corpus size.
        #[arg(long, value_name = "N")]
        n: Option<u32>,
    },
    /// Poison the training split: defender view (no ground truth) and
    /// oracle view (with trigger records).
    Poison {
        /// Clean training manifest directory.
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Override the configured poison rate.
        #[arg(long, value_name = "RATE")]
        rate: Option<f64>,
    },
    /// Fit the interpolated n-gram language model on a manifest's
    /// reference captions and save it as JSON.
    FitLm {
        /// Manifest directory to fit on.
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
    },
    /// Train the DQN masking policy on the poisoned samples.
    TrainPolicy {
        /// Clean training manifest (anchors the reward's reference captioner).
        #[arg(long, value_name = "DIR")]
        clean: Option<PathBuf>,
        /// Defender view of the poisoned training split.
        #[arg(long, value_name = "DIR")]
        defender: Option<PathBuf>,
        /// Oracle view of the poisoned training split.
        #[arg(long, value_name = "DIR")]
        oracle: Option<PathBuf>,
    },
    /// Mask every training sample with the learned (or random) policy.
    ApplyDefense {
        /// Defender view of the poisoned training split.
        #[arg(long, value_name = "DIR")]
        defender: Option<PathBuf>,
        /// Clean training manifest (reference captioner).
        #[arg(long, value_name = "DIR")]
        clean: Option<PathBuf>,
        /// Trained policy checkpoint.
        #[arg(long, value_name = "FILE", conflicts_with = "random")]
        policy: Option<PathBuf>,
        /// Use the uniform-random control policy instead of a checkpoint.
        #[arg(long)]
        random: bool,
    },
    /// Retrain the captioner on the defended data and print the paired
    /// no-defense / SRD scorecard (CSV on stdout).
    RetrainEval {
        /// Defended training manifest.
        #[arg(long, value_name = "DIR")]
        defended: Option<PathBuf>,
        /// Defender view of the poisoned training split (no-defense arm).
        #[arg(long, value_name = "DIR")]
        defender: Option<PathBuf>,
        /// Clean training manifest.
        #[arg(long, value_name = "DIR")]
        clean: Option<PathBuf>,
        /// Clean test manifest.
        #[arg(long, value_name = "DIR")]
        test: Option<PathBuf>,
    },
    /// Run the full pipeline at poison rates 0.01 / 0.05 / 0.1 and print
    /// the comparative scorecard (CSV on stdout).
    RateSweep,
    /// Render a captioner's attention over one sample as a P5 graymap.
    Heatmap {
        /// Sample id to render.
        #[arg(long, value_name = "ID")]
        id: String,
        /// Manifest directory holding the sample.
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Manifest the inspected captioner is trained on.
        #[arg(long, value_name = "DIR")]
        train: Option<PathBuf>,
    },
    /// Score a caption file against references (CSV report on stdout).
    Metrics {
        /// Candidate captions, JSONL: {"id", "caption"}.
        #[arg(long, value_name = "FILE")]
        candidates: PathBuf,
        /// Reference captions, JSONL: {"id", "references": [..]}.
        #[arg(long, value_name = "FILE")]
        references: PathBuf,
        /// Language model file produced by fit-lm.
        #[arg(long, value_name = "FILE")]
        lm: PathBuf,
        /// Clean-model captions, JSONL: {"id", "caption"}; defaults to the
        /// first reference of each sample.
        #[arg(long, value_name = "FILE")]
        clean: Option<PathBuf>,
        /// Target phrase for the ASR column (space-separated tokens).
        #[arg(long, value_name = "PHRASE")]
        target: Option<String>,
        /// Dataset label for the report row.
        #[arg(long, default_value = "eval", value_name = "LABEL")]
        dataset: String,
        /// Model label for the report row.
        #[arg(long, default_value = "candidates", value_name = "LABEL")]
        model: String,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenCorpus { .. } => "gen-corpus",
            Command::Poison { .. } => "poison",
            Command::FitLm { .. } => "fit-lm",
            Command::TrainPolicy { .. } => "train-policy",
            Command::ApplyDefense { .. } => "apply-defense",
            Command::RetrainEval { .. } => "retrain-eval",
            Command::RateSweep => "rate-sweep",
            Command::Heatmap { .. } => "heatmap",
            Command::Metrics { .. } => "metrics",
        }
    }
}

/// Everything a stage needs beyond its own flags: the effective config
/// (file + flag overrides applied) and the output root.
struct Run {
    cfg: ExperimentConfig,
    out: PathBuf,
}

impl Run {
    /// Default location of an artifact from an earlier stage.
    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    crate_version: &'a str,
    config_version: u32,
    /// SHA-256 of the effective config serialized as TOML — flag overrides
    /// included, so identical hashes mean identical runs.
    config_sha256: String,
    seed: u64,
    workers: usize,
}

fn write_run_manifest(run: &Run, command: &str) -> anyhow::Result<()> {
    let toml = run.cfg.to_toml_string();
    let digest = Sha256::digest(toml.as_bytes());
    let config_sha256: String = digest.iter().map(|b| format!("{b:02x}")).collect();
    let manifest = RunManifest {
        command,
        crate_version: env!("CARGO_PKG_VERSION"),
        config_version: CONFIG_VERSION,
        config_sha256,
        seed: run.cfg.seed,
        workers: run.cfg.workers,
    };
    fs::create_dir_all(&run.out)
        .with_context(|| format!("creating {}", run.out.display()))?;
    let path = run.out.join("run-manifest.json");
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let stage = cli.command.name();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("srd error: stage={stage}: {err:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    match cli.workers {
        Some(0) => {
            cfg.workers = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
        }
        Some(n) => cfg.workers = n,
        None => {}
    }
    let run = Run { cfg, out: cli.out };
    let name = cli.command.name();

    match cli.command {
        Command::GenCorpus { n } => gen_corpus(&run, name, n),
        Command::Poison { data, rate } => poison(&run, name, data, rate),
        Command::FitLm { data } => fit_lm_cmd(&run, name, data),
        Command::TrainPolicy {
            clean,
            defender,
            oracle,
        } => train_policy_cmd(&run, name, clean, defender, oracle),
        Command::ApplyDefense {
            defender,
            clean,
            policy,
            random,
        } => apply_defense_cmd(&run, name, defender, clean, policy, random),
        Command::RetrainEval {
            defended,
            defender,
            clean,
            test,
        } => retrain_eval(&run, name, defended, defender, clean, test),
        Command::RateSweep => rate_sweep_cmd(&run, name),
        Command::Heatmap { id, data, train } => heatmap_cmd(&run, name, &id, data, train),
        Command::Metrics {
            candidates,
            references,
            lm,
            clean,
            target,
            dataset,
            model,
        } => metrics_cmd(
            &run, name, &candidates, &references, &lm, clean.as_deref(), target.as_deref(),
            &dataset, &model,
        ),
    }
}

fn gen_corpus(run: &Run, name: &str, n: Option<u32>) -> anyhow::Result<()> {
    let mut cfg = run.cfg.clone();
    if let Some(n) = n {
        cfg.corpus.n_samples = n;
    }
    cfg.validate()?;
    let run = Run {
        cfg,
        out: run.out.clone(),
    };
    write_run_manifest(&run, name)?;
    let vocab = Vocabulary::builtin();
    let corpus = generate_corpus(&run.cfg.corpus, &vocab, run.cfg.seed)?;
    let split = split_dataset(&corpus, run.cfg.corpus.train_fraction, run.cfg.seed)?;
    split.train.save(&run.path("corpus/train"))?;
    split.test.save(&run.path("corpus/test"))?;
    eprintln!(
        "gen-corpus: {} samples -> {} train / {} test under {}",
        corpus.len(),
        split.train.len(),
        split.test.len(),
        run.path("corpus").display()
    );
    Ok(())
}

fn poison(
    run: &Run,
    name: &str,
    data: Option<PathBuf>,
    rate: Option<f64>,
) -> anyhow::Result<()> {
    let mut cfg = run.cfg.clone();
    if let Some(rate) = rate {
        cfg.attack.poison_rate = rate;
    }
    cfg.validate()?;
    let run = Run {
        cfg,
        out: run.out.clone(),
    };
    write_run_manifest(&run, name)?;
    let data = data.unwrap_or_else(|| run.path("corpus/train"));
    let train = DatasetManifest::load(&data)?;
    let attack = run.cfg.attack_effective();
    let (defender, oracle) = poison_dataset(&train, &attack)?;
    defender.save(&run.path("poison/defender"))?;
    oracle.save(&run.path("poison/oracle"))?;
    eprintln!(
        "poison: {} of {} samples poisoned (rate {}) under {}",
        oracle.poisoned_count(),
        train.len(),
        attack.poison_rate,
        run.path("poison").display()
    );
    Ok(())
}

fn fit_lm_cmd(run: &Run, name: &str, data: Option<PathBuf>) -> anyhow::Result<()> {
    write_run_manifest(run, name)?;
    let data = data.unwrap_or_else(|| run.path("corpus/train"));
    let manifest = DatasetManifest::load(&data)?;
    let captions: Vec<Vec<String>> = manifest
        .samples
        .iter()
        .flat_map(|s| s.references.iter().cloned())
        .collect();
    let lm = fit_lm(&captions)?;
    let path = run.path("lm.json");
    lm.save(&path)?;
    eprintln!(
        "fit-lm: {} captions from {} -> {}",
        captions.len(),
        data.display(),
        path.display()
    );
    Ok(())
}

fn train_policy_cmd(
    run: &Run,
    name: &str,
    clean: Option<PathBuf>,
    defender: Option<PathBuf>,
    oracle: Option<PathBuf>,
) -> anyhow::Result<()> {
    write_run_manifest(run, name)?;
    let clean = clean.unwrap_or_else(|| run.path("corpus/train"));
    let defender = defender.unwrap_or_else(|| run.path("poison/defender"));
    let oracle = oracle.unwrap_or_else(|| run.path("poison/oracle"));
    let clean_train = DatasetManifest::load(&clean)?;
    let defender_view = DatasetManifest::load(&defender)?;
    let oracle_view = DatasetManifest::load(&oracle)?;

    let vocab = Vocabulary::builtin();
    let prompt = prompt_tokens();
    let space = run.cfg.action_space()?;
    let reference = sim_train(&clean_train, run.cfg.captioner, &vocab)?;
    let backdoored = sim_train(&defender_view, run.cfg.captioner, &vocab)?;
    let instruments = fit_defense_instruments(&defender_view)?;
    let ctx = DefenseContext {
        captioner: &backdoored,
        reference: &reference,
        instruments: &instruments,
        space: &space,
        reward: &run.cfg.reward,
        prompt: &prompt,
    };
    let episodes = policy_training_set(&oracle_view)?;
    let outcome = train_policy(&episodes, &ctx, &run.cfg.train_effective())?;

    let ckpt_path = run.path("policy.ckpt");
    outcome.checkpoint.save(&ckpt_path)?;
    let mut log = String::from("episode,total_reward\n");
    for (i, r) in outcome.episode_rewards.iter().enumerate() {
        log.push_str(&format!("{i},{r}\n"));
    }
    let log_path = run.path("episodes.csv");
    fs::write(&log_path, log).with_context(|| format!("writing {}", log_path.display()))?;
    eprintln!(
        "train-policy: {} episodes over {} samples, best {}-window mean {:.3}, final epsilon {:.3} -> {}",
        outcome.episode_rewards.len(),
        episodes.len(),
        srd_core::pipeline::stages::BEST_WINDOW,
        outcome.best_window_mean,
        outcome.final_epsilon,
        ckpt_path.display()
    );
    Ok(())
}

fn apply_defense_cmd(
    run: &Run,
    name: &str,
    defender: Option<PathBuf>,
    clean: Option<PathBuf>,
    policy: Option<PathBuf>,
    random: bool,
) -> anyhow::Result<()> {
    write_run_manifest(run, name)?;
    let defender = defender.unwrap_or_else(|| run.path("poison/defender"));
    let clean = clean.unwrap_or_else(|| run.path("corpus/train"));
    let defender_view = DatasetManifest::load(&defender)?;
    let clean_train = DatasetManifest::load(&clean)?;

    let vocab = Vocabulary::builtin();
    let prompt = prompt_tokens();
    let space = run.cfg.action_space()?;
    let reference = sim_train(&clean_train, run.cfg.captioner, &vocab)?;
    let backdoored = sim_train(&defender_view, run.cfg.captioner, &vocab)?;
    let instruments = fit_defense_instruments(&defender_view)?;
    let ctx = DefenseContext {
        captioner: &backdoored,
        reference: &reference,
        instruments: &instruments,
        space: &space,
        reward: &run.cfg.reward,
        prompt: &prompt,
    };

    let checkpoint;
    let policy = if random {
        DefensePolicy::Random { seed: run.cfg.seed }
    } else {
        let path = policy.unwrap_or_else(|| run.path("policy.ckpt"));
        checkpoint = PolicyCheckpoint::load(&path)?;
        DefensePolicy::Learned(&checkpoint)
    };
    let (defended, records) = apply_defense(&defender_view, &policy, &ctx, run.cfg.workers)?;
    defended.save(&run.path("defense/defended"))?;

    let mut lines = String::new();
    for record in &records {
        lines.push_str(&serde_json::to_string(record)?);
        lines.push('\n');
    }
    let records_path = run.path("defense/records.jsonl");
    fs::write(&records_path, lines)
        .with_context(|| format!("writing {}", records_path.display()))?;
    let top = records.iter().filter(|r| r.reached_top_tier).count();
    eprintln!(
        "apply-defense: masked {} samples ({} reached the top reward tier) under {}",
        records.len(),
        top,
        run.path("defense").display()
    );
    Ok(())
}

fn retrain_eval(
    run: &Run,
    name: &str,
    defended: Option<PathBuf>,
    defender: Option<PathBuf>,
    clean: Option<PathBuf>,
    test: Option<PathBuf>,
) -> anyhow::Result<()> {
    write_run_manifest(run, name)?;
    let defended = defended.unwrap_or_else(|| run.path("defense/defended"));
    let defender = defender.unwrap_or_else(|| run.path("poison/defender"));
    let clean = clean.unwrap_or_else(|| run.path("corpus/train"));
    let test = test.unwrap_or_else(|| run.path("corpus/test"));
    let defended_train = DatasetManifest::load(&defended)?;
    let defender_view = DatasetManifest::load(&defender)?;
    let clean_train = DatasetManifest::load(&clean)?;
    let clean_test = DatasetManifest::load(&test)?;

    let train_ids: BTreeSet<&str> = clean_train.samples.iter().map(|s| s.id.as_str()).collect();
    let overlap: Vec<&str> = clean_test
        .samples
        .iter()
        .map(|s| s.id.as_str())
        .filter(|id| train_ids.contains(id))
        .collect();
    if !overlap.is_empty() {
        bail!(
            "configuration error: train and test splits overlap on {} id(s), first {:?}",
            overlap.len(),
            overlap[0]
        );
    }

    let vocab = Vocabulary::builtin();
    let prompt = prompt_tokens();
    let attack = run.cfg.attack_effective();
    let poisoned_test = trigger_test_set(&clean_test, &attack)?;
    let reference = sim_train(&clean_train, run.cfg.captioner, &vocab)?;
    let backdoored = sim_train(&defender_view, run.cfg.captioner, &vocab)?;
    let defended_model = sim_train(&defended_train, run.cfg.captioner, &vocab)?;
    let reports = paired_reports(
        &reference,
        &backdoored,
        &defended_model,
        &clean_test,
        &poisoned_test,
        &attack.target_phrase,
        &prompt,
        run.cfg.workers,
    )?;

    let csv = reports_to_csv(&reports);
    let md = reports_to_markdown(&reports);
    let eval_dir = run.path("eval");
    fs::create_dir_all(&eval_dir).with_context(|| format!("creating {}", eval_dir.display()))?;
    fs::write(eval_dir.join("report.csv"), &csv)
        .with_context(|| format!("writing {}", eval_dir.join("report.csv").display()))?;
    fs::write(eval_dir.join("report.md"), &md)
        .with_context(|| format!("writing {}", eval_dir.join("report.md").display()))?;
    eprintln!("retrain-eval: {} rows under {}", reports.len(), eval_dir.display());
    print!("{csv}");
    Ok(())
}

fn rate_sweep_cmd(run: &Run, name: &str) -> anyhow::Result<()> {
    write_run_manifest(run, name)?;
    let reports = rate_sweep(&run.cfg)?;
    let csv = reports_to_csv(&reports);
    let md = reports_to_markdown(&reports);
    let sweep_dir = run.path("sweep");
    fs::create_dir_all(&sweep_dir)
        .with_context(|| format!("creating {}", sweep_dir.display()))?;
    fs::write(sweep_dir.join("report.csv"), &csv)
        .with_context(|| format!("writing {}", sweep_dir.join("report.csv").display()))?;
    fs::write(sweep_dir.join("report.md"), &md)
        .with_context(|| format!("writing {}", sweep_dir.join("report.md").display()))?;
    eprintln!("rate-sweep: {} rows under {}", reports.len(), sweep_dir.display());
    print!("{csv}");
    Ok(())
}

fn heatmap_cmd(
    run: &Run,
    name: &str,
    id: &str,
    data: Option<PathBuf>,
    train: Option<PathBuf>,
) -> anyhow::Result<()> {
    write_run_manifest(run, name)?;
    let data = data.unwrap_or_else(|| run.path("poison/defender"));
    let train = train.unwrap_or_else(|| run.path("poison/defender"));
    let manifest = DatasetManifest::load(&data)?;
    let sample = manifest
        .samples
        .iter()
        .find(|s| s.id == id)
        .with_context(|| format!("no sample {id:?} in {}", data.display()))?;
    let vocab = Vocabulary::builtin();
    let model = sim_train(&DatasetManifest::load(&train)?, run.cfg.captioner, &vocab)?;
    let prompt = prompt_tokens();
    let pgm = attention_heatmap_pgm(&model, &sample.image, &prompt)?;
    let dir = run.path("heatmap");
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(format!("{id}.pgm"));
    fs::write(&path, pgm).with_context(|| format!("writing {}", path.display()))?;
    eprintln!("heatmap: {} -> {}", id, path.display());
    Ok(())
}

/// One line of a candidate/clean caption file.
#[derive(Deserialize)]
struct CaptionLine {
    id: String,
    caption: String,
}

/// One line of a reference file.
#[derive(Deserialize)]
struct ReferenceLine {
    id: String,
    references: Vec<String>,
}

fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_string).collect()
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<Vec<T>> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(line)
            .with_context(|| format!("{}:{}: bad record", path.display(), lineno + 1))?;
        out.push(item);
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn metrics_cmd(
    run: &Run,
    name: &str,
    candidates: &Path,
    references: &Path,
    lm: &Path,
    clean: Option<&Path>,
    target: Option<&str>,
    dataset: &str,
    model: &str,
) -> anyhow::Result<()> {
    write_run_manifest(run, name)?;
    let cand_lines: Vec<CaptionLine> = read_jsonl(candidates)?;
    if cand_lines.is_empty() {
        bail!("{}: no candidate captions", candidates.display());
    }
    let ref_lines: Vec<ReferenceLine> = read_jsonl(references)?;
    let mut ref_map = std::collections::HashMap::new();
    for line in &ref_lines {
        if ref_map.insert(line.id.as_str(), &line.references).is_some() {
            bail!("{}: duplicate reference id {:?}", references.display(), line.id);
        }
    }
    let clean_map: std::collections::HashMap<String, String> = match clean {
        Some(path) => read_jsonl::<CaptionLine>(path)?
            .into_iter()
            .map(|l| (l.id, l.caption))
            .collect(),
        None => std::collections::HashMap::new(),
    };

    let mut cands: Vec<Vec<String>> = Vec::with_capacity(cand_lines.len());
    let mut refs: Vec<Vec<Vec<String>>> = Vec::with_capacity(cand_lines.len());
    let mut cleans: Vec<Vec<String>> = Vec::with_capacity(cand_lines.len());
    for line in &cand_lines {
        let sample_refs = ref_map.get(line.id.as_str()).with_context(|| {
            format!(
                "{}: candidate {:?} has no entry in the reference file",
                candidates.display(),
                line.id
            )
        })?;
        if sample_refs.is_empty() {
            bail!("reference list for {:?} is empty", line.id);
        }
        let tokenized: Vec<Vec<String>> = sample_refs.iter().map(|r| tokenize(r)).collect();
        let clean_caption = match clean_map.get(&line.id) {
            Some(caption) => tokenize(caption),
            None => tokenized[0].clone(),
        };
        cands.push(tokenize(&line.caption));
        refs.push(tokenized);
        cleans.push(clean_caption);
    }

    let language_model = NGramLM::load(lm)?;
    let ruler_docs: Vec<Vec<String>> = refs.iter().flatten().cloned().collect();
    let encoder = TfIdfEncoder::from_corpus(&ruler_docs)?;
    let idf = IdfCorpus::from_documents(&ruler_docs)?;
    let target_tokens: Option<Vec<String>> = target.map(tokenize);

    let report = evaluate_captions(
        &CaptionSetEval {
            dataset,
            model,
            candidates: &cands,
            references: &refs,
            clean_captions: &cleans,
            target_phrase: target_tokens.as_deref(),
        },
        &language_model,
        &encoder,
        &idf,
        SFS_ALPHA,
    )?;
    print!("{}", reports_to_csv(&[report]));
    Ok(())
}
