//! Command-line driver for the augmentation experiments: argument parsing,
//! configuration resolution, thread-pool setup, manifests and exit codes.

pub mod commands;
pub mod config;
pub mod manifest;
pub mod report;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use plasma_views::models::ClassifierKind;
use plasma_views::{Error, Machine, SplitCase};

use commands::{Context, MissingInput, Outcome};
use config::{ExperimentConfig, Strategy};
use manifest::{Manifest, WallClock};

/// Environment variable naming the default output root.
pub const OUT_DIR_ENV: &str = "PLASMA_VIEWS_OUT";
pub const DEFAULT_OUT_DIR: &str = "runs";

pub mod exit {
    pub const OK: i32 = 0;
    pub const FAILURE: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const MISSING_INPUT: i32 = 3;
    pub const IO: i32 = 4;
    pub const SCHEMA: i32 = 5;
    pub const DATA: i32 = 6;
    pub const NUMERIC: i32 = 7;
}

#[derive(Debug, Parser)]
#[command(name = "plasma-views", version, about = "Viewmaker augmentation experiments for disruption prediction")]
pub struct Cli {
    /// TOML config, or a manifest (.json) whose config snapshot is reused.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed; overrides the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (results do not depend on this).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output root.
    #[arg(long, global = true, env = OUT_DIR_ENV)]
    pub out_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic multi-machine corpus.
    Synth(SynthArgs),
    /// Split, truncate and normalize a corpus into train and test sets.
    Preprocess(PreprocessArgs),
    /// Train the viewmaker against a contrastive encoder.
    TrainViewmaker(TrainViewmakerArgs),
    /// Write augmented copies of a corpus.
    Augment(AugmentArgs),
    /// Train a disruption classifier with one augmentation strategy.
    TrainClassifier(TrainClassifierArgs),
    /// Score the test set and compute alarm metrics.
    Evaluate(EvaluateArgs),
    /// DTW between originals and their views and handcrafted augmentations.
    CompareDtw(CompareDtwArgs),
    /// Summarize evaluations into one table.
    Report(ReportArgs),
    /// Every stage from data to summary table.
    Run(RunArgs),
    /// Print the resolved configuration as TOML.
    ShowConfig,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Shots per machine.
    #[arg(long)]
    pub shots: Option<usize>,
    /// Comma-separated machines.
    #[arg(long, value_delimiter = ',')]
    pub machines: Option<Vec<Machine>>,
    #[arg(long)]
    pub disruptive_fraction: Option<f64>,
    /// Output corpus directory (default `<out>/corpus/raw`).
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    /// Corpus directory (default `<out>/corpus/raw`).
    #[arg(long, conflicts_with = "import")]
    pub input: Option<PathBuf>,
    /// Directory of per-shot CSV exports with a shot index.
    #[arg(long)]
    pub import: Option<PathBuf>,
    /// zero-shot, few-shot, many-shot or single-machine.
    #[arg(long)]
    pub case: Option<SplitCase>,
    /// Machine held out (zero/few-shot) or used alone (single-machine).
    #[arg(long)]
    pub new_machine: Option<Machine>,
}

#[derive(Debug, Args)]
pub struct TrainViewmakerArgs {
    #[arg(long)]
    pub steps: Option<usize>,
    /// Training corpus (default `<out>/corpus/train`).
    #[arg(long)]
    pub train: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AugmentArgs {
    #[arg(long)]
    pub strategy: Option<Strategy>,
    #[arg(long)]
    pub copies: Option<usize>,
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainClassifierArgs {
    #[arg(long, default_value = "none")]
    pub strategy: Strategy,
    #[arg(long)]
    pub kind: Option<ClassifierKind>,
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long, default_value = "none")]
    pub strategy: Strategy,
    /// Disruptivity CSV (`shot,time_ms,score`) to evaluate instead of the
    /// strategy's trained classifier.
    #[arg(long)]
    pub scores: Option<PathBuf>,
    #[arg(long)]
    pub t_high: Option<f64>,
    #[arg(long)]
    pub t_low: Option<f64>,
    #[arg(long)]
    pub hysteresis: Option<usize>,
}

#[derive(Debug, Args)]
pub struct CompareDtwArgs {
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub input: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Output roots to summarize (default: the current one).
    pub runs: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Use exported shots instead of synthetic data.
    #[arg(long)]
    pub import: Option<PathBuf>,
    /// Comma-separated strategies to train and evaluate.
    #[arg(long, value_delimiter = ',')]
    pub strategies: Option<Vec<Strategy>>,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Preprocess(_) => "preprocess",
            Command::TrainViewmaker(_) => "train-viewmaker",
            Command::Augment(_) => "augment",
            Command::TrainClassifier(_) => "train-classifier",
            Command::Evaluate(_) => "evaluate",
            Command::CompareDtw(_) => "compare-dtw",
            Command::Report(_) => "report",
            Command::Run(_) => "run",
            Command::ShowConfig => "show-config",
        }
    }

    /// Folds command-line flags into the config (flags win).
    fn apply_overrides(&self, cfg: &mut ExperimentConfig) {
        match self {
            Command::Synth(a) => {
                if let Some(n) = a.shots {
                    cfg.synth.shots_per_machine = n;
                }
                if let Some(m) = &a.machines {
                    cfg.synth.machines = m.clone();
                }
                if let Some(f) = a.disruptive_fraction {
                    cfg.synth.disruptive_fraction = f;
                }
            }
            Command::Preprocess(a) => {
                if let Some(c) = a.case {
                    cfg.preprocess.case = c;
                }
                if let Some(m) = a.new_machine {
                    cfg.preprocess.new_machine = m;
                }
            }
            Command::TrainViewmaker(a) => {
                if let Some(s) = a.steps {
                    cfg.viewmaker.train.steps = s;
                }
            }
            Command::Augment(a) => {
                if let Some(s) = a.strategy {
                    cfg.augment.strategy = s;
                }
                if let Some(c) = a.copies {
                    cfg.augment.copies = c;
                }
            }
            Command::TrainClassifier(a) => {
                if let Some(k) = a.kind {
                    cfg.classifier.model.kind = k;
                }
                if let Some(s) = a.steps {
                    cfg.classifier.train.steps = s;
                }
            }
            Command::Evaluate(a) => {
                if let Some(t) = a.t_high {
                    cfg.evaluate.alarm.t_high = t;
                }
                if let Some(t) = a.t_low {
                    cfg.evaluate.alarm.t_low = t;
                }
                if let Some(h) = a.hysteresis {
                    cfg.evaluate.alarm.hysteresis = h;
                }
            }
            Command::CompareDtw(a) => {
                if let Some(n) = a.samples {
                    cfg.compare_dtw.samples = n;
                }
            }
            Command::Run(a) => {
                if let Some(s) = &a.strategies {
                    cfg.classifier.strategies = s.clone();
                }
            }
            Command::Report(_) | Command::ShowConfig => {}
        }
    }
}

/// Resolves flags > file > defaults.
pub fn resolve_config(cli: &Cli) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cli.command.apply_overrides(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

fn dispatch(ctx: &Context, command: &Command) -> anyhow::Result<Outcome> {
    match command {
        Command::Synth(a) => commands::synth(ctx, a.output.clone()),
        Command::Preprocess(a) => commands::preprocess(ctx, a.input.clone(), a.import.clone()),
        Command::TrainViewmaker(a) => commands::train_viewmaker(ctx, a.train.clone()),
        Command::Augment(a) => commands::augment(
            ctx,
            ctx.config.augment.strategy,
            ctx.config.augment.copies,
            a.input.clone(),
            a.output.clone(),
        ),
        Command::TrainClassifier(a) => commands::train_classifier_cmd(ctx, a.strategy),
        Command::Evaluate(a) => commands::evaluate_cmd(ctx, a.strategy, a.scores.clone()),
        Command::CompareDtw(a) => commands::compare_dtw(ctx, None, a.input.clone()),
        Command::Report(a) => commands::report_cmd(ctx, &a.runs),
        Command::Run(a) => commands::run_all(ctx, a.import.clone()),
        Command::ShowConfig => Ok(Outcome {
            summary: ctx.config.to_toml()?,
            ..Default::default()
        }),
    }
}

/// Runs one command and records its manifest. Returns the command's summary
/// text and the manifest path (none for `show-config`).
pub fn execute(cli: &Cli) -> anyhow::Result<(String, Option<PathBuf>)> {
    let config = resolve_config(cli)?;
    let root = cli.out_dir.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR));
    let threads = match cli.threads {
        Some(0) => return Err(Error::Config("--threads must be positive".into()).into()),
        Some(n) => n,
        None => rayon::current_num_threads(),
    };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build()?;
    let ctx = Context { root, config, threads };
    let started = manifest::now_unix_s();
    let outcome = pool.install(|| dispatch(&ctx, &cli.command))?;
    if matches!(cli.command, Command::ShowConfig) {
        return Ok((outcome.summary, None));
    }
    let m = Manifest {
        command: cli.command.name().into(),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        seed: ctx.config.seed,
        config: ctx.config.clone(),
        inputs: manifest::fingerprint_all(&ctx.root, &outcome.inputs)?,
        artifacts: manifest::digest_all(&ctx.root, &outcome.artifacts)?,
        wall_clock: WallClock {
            started_unix_s: started,
            finished_unix_s: manifest::now_unix_s(),
        },
        threads,
    };
    let path = m.write(&ctx.root)?;
    Ok((outcome.summary, Some(path)))
}

/// Maps an error to its exit code by category.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err.downcast_ref::<MissingInput>().is_some() {
        return exit::MISSING_INPUT;
    }
    if let Some(e) = err.downcast_ref::<Error>() {
        return match e {
            Error::Config(_) | Error::Usage(_) => exit::CONFIG,
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => exit::MISSING_INPUT,
            Error::Io { .. } => exit::IO,
            Error::Schema(_) | Error::Parse { .. } | Error::Json(_) | Error::Shape { .. } => exit::SCHEMA,
            Error::InsufficientData(_) | Error::MissingScores(_) => exit::DATA,
            Error::NonFinite { .. } | Error::Diverged { .. } => exit::NUMERIC,
        };
    }
    if err.downcast_ref::<rayon::ThreadPoolBuildError>().is_some() {
        return exit::CONFIG;
    }
    exit::FAILURE
}
