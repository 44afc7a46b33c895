//! Command-line front end.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::Config;
use crate::datakit::{
    generate_synthetic, load_checkpoint, load_split, save_checkpoint, write_atomic, write_dataset, Split,
};
use crate::error::{Error, Result};
use crate::eval::{aupr, pr_csv, pr_curve, run_evaluation, score_population, EvalOptions, Orientation, Positive,
    ScoredPopulation};
use crate::posthoc::{classifier_logits, fit_class_stats, ClassConditionalStats, ScoreKind};
use crate::tensor::Tensor;
use crate::train::{log_csv, LabeledBatch, TrainMode, TrainState, Trainer};

pub const THREADS_ENV: &str = "OODKIT_THREADS";

#[derive(Debug, Parser)]
#[command(name = "oodkit", version, about = "GAN-assisted out-of-distribution detection", arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Generate the synthetic dataset into OUT/data.
    GenData(Common),
    /// Train a classifier (and GAN in joint mode) into OUT/MODE.
    Train(WithMode),
    /// Fit class-conditional statistics on training logits.
    FitStats(WithMode),
    /// Score one stored sample (config keys score.split, score.index).
    Score(WithScores),
    /// Evaluate threshold and AUPR metrics for each score kind.
    Eval(WithScores),
    /// Write precision-recall curves for each score kind.
    PrCurve(WithScores),
}

#[derive(Debug, Args)]
struct Common {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Working directory for all artifacts.
    #[arg(long)]
    out: PathBuf,
    /// Configuration override `dotted.key=value`; repeatable.
    #[arg(long = "set", value_name = "K=V")]
    overrides: Vec<String>,
}

#[derive(Debug, Args)]
struct WithMode {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum, default_value_t = ModeArg::Joint)]
    mode: ModeArg,
}

#[derive(Debug, Args)]
struct WithScores {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum, default_value_t = ModeArg::Joint)]
    mode: ModeArg,
    /// Comma-separated score kinds.
    #[arg(long, value_delimiter = ',', value_parser = parse_kind, default_value = "softmax,cossim,chi2,mi")]
    scores: Vec<ScoreKind>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Ce,
    Joint,
}

fn parse_kind(s: &str) -> std::result::Result<ScoreKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    GenData,
    Train,
    FitStats,
    Score,
    Eval,
    PrCurve,
}

impl Command {
    pub fn as_str(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Train => "train",
            Command::FitStats => "fit-stats",
            Command::Score => "score",
            Command::Eval => "eval",
            Command::PrCurve => "pr-curve",
        }
    }
}

/// A validated invocation.
#[derive(Debug, Clone, PartialEq)]
pub struct CommandPlan {
    pub command: Command,
    pub config: Option<PathBuf>,
    pub seed: u64,
    pub overrides: Vec<String>,
    pub out: PathBuf,
    pub mode: TrainMode,
    pub scores: Vec<ScoreKind>,
}

pub fn parse_command<I, S>(argv: I) -> std::result::Result<CommandPlan, clap::Error>
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(argv)?;
    let mode = |m: ModeArg| match m {
        ModeArg::Ce => TrainMode::Ce,
        ModeArg::Joint => TrainMode::Joint,
    };
    let (command, common, mode, mut scores) = match cli.command {
        Cmd::GenData(c) => (Command::GenData, c, TrainMode::Joint, vec![]),
        Cmd::Train(a) => (Command::Train, a.common, mode(a.mode), vec![]),
        Cmd::FitStats(a) => (Command::FitStats, a.common, mode(a.mode), vec![]),
        Cmd::Score(a) => (Command::Score, a.common, mode(a.mode), a.scores),
        Cmd::Eval(a) => (Command::Eval, a.common, mode(a.mode), a.scores),
        Cmd::PrCurve(a) => (Command::PrCurve, a.common, mode(a.mode), a.scores),
    };
    scores.sort();
    scores.dedup();
    Ok(CommandPlan {
        command,
        config: common.config,
        seed: common.seed,
        overrides: common.overrides,
        out: common.out,
        mode,
        scores,
    })
}

/// Worker threads from `OODKIT_THREADS` (default 1).
pub fn threads_from_env() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(1),
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| Error::Config(format!("{THREADS_ENV}={v} is not a positive integer"))),
    }
}

pub fn data_dir(out: &Path) -> PathBuf {
    out.join("data")
}

pub fn run_dir(out: &Path, mode: TrainMode) -> PathBuf {
    out.join(mode.as_str())
}

pub fn checkpoint_path(out: &Path, mode: TrainMode) -> PathBuf {
    run_dir(out, mode).join("checkpoint.oodc")
}

pub fn stats_path(out: &Path, mode: TrainMode) -> PathBuf {
    run_dir(out, mode).join("stats.json")
}

fn manifest_path(out: &Path, split: Split) -> PathBuf {
    data_dir(out).join(format!("{}.json", split.as_str()))
}

fn write_text(path: &Path, text: &str) -> Result<PathBuf> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_atomic(path, text.as_bytes())?;
    Ok(path.to_path_buf())
}

fn load_config(plan: &CommandPlan) -> Result<Config> {
    let text = match &plan.config {
        Some(p) => Some(std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
        None => None,
    };
    Config::load(text.as_deref(), &plan.overrides)
}

fn labeled(out: &Path, split: Split) -> Result<LabeledBatch> {
    let (manifest, x, labels) = load_split(manifest_path(out, split))?;
    let labels = labels.ok_or_else(|| Error::Config(format!("{} split has no labels", split.as_str())))?;
    LabeledBatch::new(x, labels, manifest.class_names.len())
}

fn unlabeled(out: &Path, split: Split) -> Result<Tensor> {
    Ok(load_split(manifest_path(out, split))?.1)
}

fn load_state(plan: &CommandPlan, cfg: &Config) -> Result<TrainState> {
    let state = load_checkpoint(checkpoint_path(&plan.out, plan.mode), &cfg.network_specs())?;
    if state.mode != plan.mode {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds a {} run, expected {}",
            state.mode.as_str(),
            plan.mode.as_str()
        )));
    }
    Ok(state)
}

fn load_stats(plan: &CommandPlan) -> Result<Option<ClassConditionalStats>> {
    let needed = plan.scores.iter().any(|k| matches!(k, ScoreKind::Cossim | ScoreKind::Chi2));
    if !needed {
        return Ok(None);
    }
    let path = stats_path(&plan.out, plan.mode);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    ClassConditionalStats::from_json(&text).map(Some)
}

fn eval_options(plan: &CommandPlan, cfg: &Config) -> Result<EvalOptions> {
    Ok(EvalOptions {
        kinds: plan.scores.clone(),
        mc_samples: cfg.posthoc.mc_samples,
        seed: plan.seed,
        threads: threads_from_env()?,
    })
}

/// Runs one subcommand and returns the artifacts it wrote.
pub fn execute(plan: &CommandPlan) -> Result<Vec<PathBuf>> {
    let cfg = load_config(plan)?;
    let out = &plan.out;
    match plan.command {
        Command::GenData => {
            let data = generate_synthetic(&cfg.data)?;
            let mut written = write_dataset(&data_dir(out), &cfg.data, &data)?;
            written.push(write_text(&data_dir(out).join("config.toml"), &cfg.to_toml()?)?);
            Ok(written)
        }
        Command::Train => {
            let train = labeled(out, Split::Train)?;
            let trainer = Trainer::new(&train, &cfg.network_specs(), cfg.train.clone(), plan.mode, plan.seed)?;
            let run = trainer.run()?;
            let dir = run_dir(out, plan.mode);
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let ckpt = checkpoint_path(out, plan.mode);
            save_checkpoint(&run.state, &ckpt)?;
            let log = write_text(&dir.join("losses.csv"), &log_csv(run.mode, &run.log))?;
            Ok(vec![ckpt, log])
        }
        Command::FitStats => {
            let train = labeled(out, Split::Train)?;
            let state = load_state(plan, &cfg)?;
            let logits = classifier_logits(&state.nets.cls, &train.inputs, 256)?;
            let stats = fit_class_stats(&logits, &train.labels, cfg.posthoc.shrinkage)?;
            Ok(vec![write_text(&stats_path(out, plan.mode), &stats.to_json())?])
        }
        Command::Score => {
            let split = Split::parse(&cfg.score.split)?;
            let x = unlabeled(out, split)?;
            let i = cfg.score.index;
            if i >= x.batch() {
                return Err(Error::Index(format!(
                    "sample {i} outside the {} split of {} samples",
                    split.as_str(),
                    x.batch()
                )));
            }
            let sample = x.select_rows(&[i]);
            let state = load_state(plan, &cfg)?;
            let stats = load_stats(plan)?;
            let opts = eval_options(plan, &cfg)?;
            let mut records = Vec::new();
            for &kind in &plan.scores {
                records.extend(score_population(&state.nets.cls, stats.as_ref(), &sample, kind, &opts, 2)?);
            }
            let text = serde_json::to_string_pretty(&records).unwrap() + "\n";
            print!("{text}");
            Ok(vec![write_text(&run_dir(out, plan.mode).join("score.json"), &text)?])
        }
        Command::Eval => {
            let test = labeled(out, Split::Test)?;
            let ood = unlabeled(out, Split::Ood)?;
            let state = load_state(plan, &cfg)?;
            let stats = load_stats(plan)?;
            let report = run_evaluation(&state.nets.cls, stats.as_ref(), &test, &ood, &eval_options(plan, &cfg)?)?;
            print!("{}", report.to_json());
            Ok(vec![write_text(&run_dir(out, plan.mode).join("report.json"), &report.to_json())?])
        }
        Command::PrCurve => {
            let test = labeled(out, Split::Test)?;
            let ood = unlabeled(out, Split::Ood)?;
            let state = load_state(plan, &cfg)?;
            let stats = load_stats(plan)?;
            let opts = eval_options(plan, &cfg)?;
            let mut written = Vec::new();
            for &kind in &plan.scores {
                let q = |x: &Tensor, id| -> Result<Vec<f64>> {
                    Ok(score_population(&state.nets.cls, stats.as_ref(), x, kind, &opts, id)?
                        .into_iter()
                        .map(|r| r.q)
                        .collect())
                };
                let orientation = if kind.high_is_out() {
                    Orientation::HighIsOut
                } else {
                    Orientation::HighIsIn
                };
                let pop = ScoredPopulation::new(q(&test.inputs, 0)?, q(&ood, 1)?, orientation)?;
                for (positive, tag) in [(Positive::In, "in"), (Positive::Out, "out")] {
                    let curve = pr_curve(&pop, positive)?;
                    println!("{kind} aupr_{tag} {:.6}", aupr(&curve));
                    let path = run_dir(out, plan.mode).join(format!("pr_{kind}_{tag}.csv"));
                    written.push(write_text(&path, &pr_csv(&curve))?);
                }
            }
            Ok(written)
        }
    }
}
