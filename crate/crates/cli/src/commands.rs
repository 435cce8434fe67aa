//! One function per command. Each reads its inputs from the output root,
//! writes its artifacts there and reports what it touched so the caller can
//! record a manifest.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use plasma_views::analysis::{compare_augmentations, DtwConfig};
use plasma_views::augbase;
use plasma_views::evaluation::{evaluate, ScoreSeries};
use plasma_views::gradnet::Checkpoint;
use plasma_views::models::{
    disruptivity, read_disruptivity, train_classifier, windowize, write_disruptivity, Augmentation, Classifier,
    ClassifierKind, ClassifierTrainConfig,
};
use plasma_views::pipeline::{
    generate_synthetic_with, import_exports, prepare_corpus, read_corpus, write_corpus, NormStats,
};
use plasma_views::viewmaker::{self, train_adversarial, Encoder, TrainConfig, ViewmakerModel};
use plasma_views::{domain, Discharge, Error, Machine, Rng, SplitCase, SplitSpec};

use crate::config::{ExperimentConfig, Strategy};
use crate::report;

/// A required upstream artifact is absent.
#[derive(Debug)]
pub struct MissingInput {
    pub what: String,
    pub path: PathBuf,
    pub produced_by: &'static str,
}

impl std::fmt::Display for MissingInput {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "missing {} at {} (produced by `{}`)",
            self.what,
            self.path.display(),
            self.produced_by
        )
    }
}

impl std::error::Error for MissingInput {}

pub struct Context {
    pub root: PathBuf,
    pub config: ExperimentConfig,
    pub threads: usize,
}

#[derive(Debug, Default)]
pub struct Outcome {
    pub inputs: Vec<PathBuf>,
    pub artifacts: Vec<PathBuf>,
    pub summary: String,
}

impl Outcome {
    fn absorb(&mut self, other: Outcome) {
        for p in other.inputs {
            if !self.inputs.contains(&p) && !self.artifacts.contains(&p) {
                self.inputs.push(p);
            }
        }
        self.artifacts.extend(other.artifacts);
        self.summary.push_str(&other.summary);
    }
}

impl Context {
    pub fn raw_dir(&self) -> PathBuf {
        self.root.join("corpus").join("raw")
    }
    pub fn train_dir(&self) -> PathBuf {
        self.root.join("corpus").join("train")
    }
    pub fn test_dir(&self) -> PathBuf {
        self.root.join("corpus").join("test")
    }
    pub fn norm_stats(&self) -> PathBuf {
        self.root.join("corpus").join("norm_stats.json")
    }
    pub fn split_file(&self) -> PathBuf {
        self.root.join("corpus").join("split.json")
    }
    pub fn viewmaker_dir(&self) -> PathBuf {
        self.root.join("viewmaker")
    }
    pub fn classifier_dir(&self, s: Strategy) -> PathBuf {
        self.root.join("classifiers").join(s.as_str())
    }
    pub fn eval_dir(&self, s: Strategy) -> PathBuf {
        self.root.join("eval").join(s.as_str())
    }
    pub fn augmented_dir(&self, s: Strategy) -> PathBuf {
        self.root.join("augmented").join(s.as_str())
    }
    pub fn dtw_dir(&self) -> PathBuf {
        self.root.join("dtw")
    }
    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }
}

fn require(path: &Path, what: &str, produced_by: &'static str) -> anyhow::Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(MissingInput {
            what: what.into(),
            path: path.into(),
            produced_by,
        }
        .into())
    }
}

fn read_dir_corpus(path: &Path, what: &str, produced_by: &'static str) -> anyhow::Result<Vec<Discharge>> {
    require(path, what, produced_by)?;
    Ok(read_corpus(path)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| io(parent, e))?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| io(path, e))?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| io(path, e))?;
    Ok(())
}

fn io(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.into(),
        source: e,
    }
}

fn load_viewmaker(ctx: &Context) -> anyhow::Result<(PathBuf, ViewmakerModel)> {
    let path = ctx.viewmaker_dir().join("viewmaker.json");
    require(&path, "viewmaker checkpoint", "train-viewmaker")?;
    let vm = ViewmakerModel::from_checkpoint(&Checkpoint::load(&path)?)?;
    Ok((path, vm))
}

pub fn synth(ctx: &Context, output: Option<PathBuf>) -> anyhow::Result<Outcome> {
    let cfg = &ctx.config.synth;
    let rng = Rng::new(ctx.config.stream_seed("synth"));
    let mut corpus = Vec::new();
    for &m in &cfg.machines {
        corpus.extend(generate_synthetic_with(
            &cfg.generator,
            cfg.shots_per_machine,
            m,
            cfg.disruptive_fraction,
            &rng,
        )?);
    }
    let dir = output.unwrap_or_else(|| ctx.raw_dir());
    write_corpus(&corpus, &dir)?;
    let disruptive = corpus.iter().filter(|d| d.disruptive).count();
    Ok(Outcome {
        inputs: vec![],
        artifacts: vec![dir.clone()],
        summary: format!("synth: {} shots ({disruptive} disruptive) -> {}\n", corpus.len(), dir.display()),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitRecord {
    pub case: SplitCase,
    pub new_machine: Machine,
    pub train: Vec<String>,
    pub test: Vec<String>,
    /// Shots discarded as too short after truncation.
    pub dropped: Vec<String>,
}

pub fn preprocess(ctx: &Context, input: Option<PathBuf>, import: Option<PathBuf>) -> anyhow::Result<Outcome> {
    let cfg = &ctx.config.preprocess;
    let (source, raw) = match import {
        Some(dir) => {
            require(&dir, "export directory", "an external export")?;
            let raw = import_exports(&dir, &cfg.import)?;
            (dir, raw)
        }
        None => {
            let dir = input.unwrap_or_else(|| ctx.raw_dir());
            let raw = read_dir_corpus(&dir, "raw corpus", "synth")?;
            (dir, raw)
        }
    };
    if raw.is_empty() {
        return Err(Error::InsufficientData(format!("no shots in {}", source.display())).into());
    }
    let spec = SplitSpec {
        few_shot_count: cfg.few_shot_count,
        holdout_fraction: cfg.holdout_fraction,
        ..SplitSpec::new(cfg.case, cfg.new_machine, ctx.config.stream_seed("split"))
    };
    let split = domain::make_splits(&raw, &spec)?;
    let (train, mut dropped) = prepare_corpus(&split.train, &cfg.steps)?;
    let (test, dropped_test) = prepare_corpus(&split.test, &cfg.steps)?;
    dropped.extend(dropped_test);
    if train.is_empty() || test.is_empty() {
        return Err(Error::InsufficientData(format!(
            "split left {} training and {} test shots",
            train.len(),
            test.len()
        ))
        .into());
    }
    let stats = NormStats::fit(&train, cfg.steps.normalization)?;
    for w in &stats.warnings {
        log::warn!("{w}");
    }
    let train = stats.apply_corpus(&train);
    let test = stats.apply_corpus(&test);
    write_corpus(&train, &ctx.train_dir())?;
    write_corpus(&test, &ctx.test_dir())?;
    stats.save(&ctx.norm_stats())?;
    let record = SplitRecord {
        case: cfg.case,
        new_machine: cfg.new_machine,
        train: train.iter().map(|d| d.id.clone()).collect(),
        test: test.iter().map(|d| d.id.clone()).collect(),
        dropped: dropped.clone(),
    };
    write_json(&ctx.split_file(), &record)?;
    Ok(Outcome {
        inputs: vec![source],
        artifacts: vec![ctx.train_dir(), ctx.test_dir(), ctx.norm_stats(), ctx.split_file()],
        summary: format!(
            "preprocess: {} case, new machine {}: {} train, {} test, {} dropped\n",
            cfg.case,
            cfg.new_machine,
            train.len(),
            test.len(),
            dropped.len()
        ),
    })
}

pub fn train_viewmaker(ctx: &Context, train: Option<PathBuf>) -> anyhow::Result<Outcome> {
    let cfg = &ctx.config.viewmaker;
    let train_dir = train.unwrap_or_else(|| ctx.train_dir());
    let corpus = read_dir_corpus(&train_dir, "training corpus", "preprocess")?;
    let init = Rng::new(ctx.config.stream_seed("viewmaker-init"));
    let mut vm = ViewmakerModel::new(cfg.model, &mut init.substream("viewmaker"))?;
    let mut enc = Encoder::new(cfg.encoder, &mut init.substream("encoder"))?;
    let tcfg = TrainConfig {
        seed: ctx.config.stream_seed("viewmaker-train"),
        ..cfg.train
    };
    let history = train_adversarial(&mut vm, &mut enc, &corpus, &tcfg)?;
    let dir = ctx.viewmaker_dir();
    std::fs::create_dir_all(&dir).map_err(|e| io(&dir, e))?;
    vm.checkpoint()?.save(&dir.join("viewmaker.json"))?;
    enc.checkpoint()?.save(&dir.join("encoder.json"))?;
    history.save(&dir.join("history.csv"))?;
    let last = history.rows.last().map(|r| r.encoder_loss).unwrap_or(f64::NAN);
    Ok(Outcome {
        inputs: vec![train_dir],
        artifacts: vec![dir.clone()],
        summary: format!(
            "train-viewmaker: {} steps, final contrastive loss {last:.4} -> {}\n",
            history.rows.len(),
            dir.display()
        ),
    })
}

pub fn augment(
    ctx: &Context,
    strategy: Strategy,
    copies: usize,
    input: Option<PathBuf>,
    output: Option<PathBuf>,
) -> anyhow::Result<Outcome> {
    let input = input.unwrap_or_else(|| ctx.train_dir());
    let corpus = read_dir_corpus(&input, "corpus to augment", "preprocess")?;
    let mut inputs = vec![input];
    let vm = match strategy {
        Strategy::None => {
            return Err(Error::Config("augment needs a strategy other than `none`".into()).into());
        }
        Strategy::Viewmaker => {
            let (path, vm) = load_viewmaker(ctx)?;
            inputs.push(path);
            Some(vm)
        }
        Strategy::Tsaug => None,
    };
    let tsaug = &ctx.config.augment.tsaug;
    let rng = Rng::new(ctx.config.stream_seed("augment"));
    let jobs: Vec<(usize, usize)> = (0..corpus.len()).flat_map(|i| (0..copies).map(move |k| (i, k))).collect();
    let out = jobs
        .par_iter()
        .map(|&(i, k)| -> anyhow::Result<Discharge> {
            let d = &corpus[i];
            let mut r = rng.fork((i * copies + k) as u64);
            let mut v = match &vm {
                Some(vm) => viewmaker::make_view(vm, d, &mut r)?,
                None => augbase::apply_to_discharge(tsaug, d, &mut r)?,
            };
            v.id = format!("{}#view-{k}", d.id);
            Ok(v)
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let dir = output.unwrap_or_else(|| ctx.augmented_dir(strategy));
    write_corpus(&out, &dir)?;
    Ok(Outcome {
        inputs,
        artifacts: vec![dir.clone()],
        summary: format!("augment: {} {strategy} views -> {}\n", out.len(), dir.display()),
    })
}

pub fn train_classifier_cmd(ctx: &Context, strategy: Strategy) -> anyhow::Result<Outcome> {
    let cfg = &ctx.config.classifier;
    let corpus = read_dir_corpus(&ctx.train_dir(), "training corpus", "preprocess")?;
    let mut inputs = vec![ctx.train_dir()];
    let windows = windowize(&corpus, cfg.model.window_length, cfg.stride)?;
    let vm = if strategy == Strategy::Viewmaker {
        let (path, vm) = load_viewmaker(ctx)?;
        inputs.push(path);
        Some(vm)
    } else {
        None
    };
    let aug = match (strategy, &vm) {
        (Strategy::Viewmaker, Some(vm)) => Augmentation::Viewmaker(vm),
        (Strategy::Tsaug, _) => Augmentation::Tsaug(&ctx.config.augment.tsaug),
        _ => Augmentation::None,
    };
    // Every strategy shares one seed so runs differ only by augmentation.
    let tcfg = ClassifierTrainConfig {
        seed: ctx.config.stream_seed("classifier"),
        ..cfg.train
    };
    let (model, curve) = train_classifier(&cfg.model, &windows, aug, &tcfg)?;
    let dir = ctx.classifier_dir(strategy);
    std::fs::create_dir_all(&dir).map_err(|e| io(&dir, e))?;
    model.checkpoint()?.save(&dir.join("classifier.json"))?;
    let mut csv = String::from("step,loss\n");
    for (i, l) in curve.iter().enumerate() {
        let _ = writeln!(csv, "{i},{l:e}");
    }
    write_text(&dir.join("loss.csv"), &csv)?;
    let positives = windows.iter().filter(|w| w.label).count();
    Ok(Outcome {
        inputs,
        artifacts: vec![dir.clone()],
        summary: format!(
            "train-classifier [{strategy}]: {} windows ({positives} positive), final loss {:.4} -> {}\n",
            windows.len(),
            curve.last().copied().unwrap_or(f64::NAN),
            dir.display()
        ),
    })
}

/// Identifies an evaluation for the summary table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub strategy: Strategy,
    pub case: Option<SplitCase>,
    pub new_machine: Option<Machine>,
    pub classifier: Option<ClassifierKind>,
    pub test_shots: usize,
    /// Test shots shorter than the classifier window, left out of scoring.
    pub unscored: Vec<String>,
}

pub fn evaluate_cmd(ctx: &Context, strategy: Strategy, scores: Option<PathBuf>) -> anyhow::Result<Outcome> {
    let ecfg = &ctx.config.evaluate;
    let test = read_dir_corpus(&ctx.test_dir(), "test corpus", "preprocess")?;
    let mut inputs = vec![ctx.test_dir()];
    let dir = ctx.eval_dir(strategy);
    std::fs::create_dir_all(&dir).map_err(|e| io(&dir, e))?;
    let mut artifacts = Vec::new();
    let (map, scored, unscored, kind): (HashMap<String, ScoreSeries>, Vec<Discharge>, Vec<String>, _) = match scores {
        Some(path) => {
            require(&path, "disruptivity scores", "an external model")?;
            inputs.push(path.clone());
            (read_disruptivity(&path)?, test.clone(), vec![], None)
        }
        None => {
            let ck_path = ctx.classifier_dir(strategy).join("classifier.json");
            require(&ck_path, "classifier checkpoint", "train-classifier")?;
            inputs.push(ck_path.clone());
            let model = Classifier::from_checkpoint(&Checkpoint::load(&ck_path)?)?;
            let w = model.spec().window_length;
            let (scored, short): (Vec<Discharge>, Vec<Discharge>) = test.iter().cloned().partition(|d| d.len() >= w);
            let unscored: Vec<String> = short.iter().map(|d| d.id.clone()).collect();
            if !unscored.is_empty() {
                log::warn!(
                    "{} test shots are shorter than the {w}-step window and are not scored",
                    unscored.len()
                );
            }
            let series = scored
                .par_iter()
                .map(|d| Ok((d.id.clone(), disruptivity(&model, d)?)))
                .collect::<Result<Vec<_>, Error>>()?;
            let path = dir.join("scores.csv");
            write_disruptivity(&path, &series)?;
            artifacts.push(path);
            (series.into_iter().collect(), scored, unscored, Some(model.spec().kind))
        }
    };
    let report = evaluate(&map, &scored, &ecfg.alarm, ecfg.auc_grid)?;
    report.save(&dir)?;
    for name in ["metrics.json", "metrics.txt", "roc.csv", "outcomes.csv"] {
        artifacts.push(dir.join(name));
    }
    let split: Option<SplitRecord> = std::fs::read_to_string(ctx.split_file())
        .ok()
        .and_then(|t| serde_json::from_str(&t).ok());
    let record = RunRecord {
        strategy,
        case: split.as_ref().map(|s| s.case),
        new_machine: split.as_ref().map(|s| s.new_machine),
        classifier: kind,
        test_shots: scored.len(),
        unscored,
    };
    write_json(&dir.join("run.json"), &record)?;
    artifacts.push(dir.join("run.json"));
    let auc = report.auc.map_or("undefined".to_string(), |a| format!("{a:.4}"));
    Ok(Outcome {
        inputs,
        artifacts,
        summary: format!(
            "evaluate [{strategy}]: AUC {auc}, recall {:.4}, precision {:.4}, F2 {:.4}\n",
            report.recall, report.precision, report.f2
        ),
    })
}

pub fn compare_dtw(ctx: &Context, samples: Option<usize>, input: Option<PathBuf>) -> anyhow::Result<Outcome> {
    let cfg = &ctx.config.compare_dtw;
    let input = input.unwrap_or_else(|| ctx.train_dir());
    let corpus = read_dir_corpus(&input, "corpus to compare", "preprocess")?;
    let (vm_path, vm) = load_viewmaker(ctx)?;
    let report = compare_augmentations(
        &corpus,
        &vm,
        &ctx.config.augment.tsaug,
        samples.unwrap_or(cfg.samples),
        &DtwConfig { band: cfg.band },
        &Rng::new(ctx.config.stream_seed("compare-dtw")),
    )?;
    let dir = ctx.dtw_dir();
    report.save(&dir)?;
    let p = report
        .wilcoxon
        .map_or_else(|| "not computed".to_string(), |w| format!("{:.3e}", w.p_value));
    Ok(Outcome {
        inputs: vec![input, vm_path],
        artifacts: vec![dir.clone()],
        summary: format!(
            "compare-dtw: {} pairs, mean DTW view {:.3} vs tsaug {:.3}, Wilcoxon p {p}\n",
            report.n_pairs, report.mean_view, report.mean_tsaug
        ),
    })
}

pub fn report_cmd(ctx: &Context, runs: &[PathBuf]) -> anyhow::Result<Outcome> {
    let roots: Vec<PathBuf> = if runs.is_empty() { vec![ctx.root.clone()] } else { runs.to_vec() };
    let (table, inputs) = report::collect(&roots, &ctx.root)?;
    if table.rows.is_empty() {
        return Err(MissingInput {
            what: "evaluation results".into(),
            path: ctx.root.join("eval"),
            produced_by: "evaluate",
        }
        .into());
    }
    let dir = ctx.report_dir();
    write_text(&dir.join("table.csv"), &table.to_csv())?;
    let text = table.to_text();
    write_text(&dir.join("table.txt"), &text)?;
    Ok(Outcome {
        inputs,
        artifacts: vec![dir.join("table.csv"), dir.join("table.txt")],
        summary: text,
    })
}

/// Synthetic or imported data through every stage to the summary table.
pub fn run_all(ctx: &Context, import: Option<PathBuf>) -> anyhow::Result<Outcome> {
    let mut all = Outcome::default();
    if import.is_none() {
        all.absorb(synth(ctx, None)?);
    }
    all.absorb(preprocess(ctx, None, import)?);
    let strategies = &ctx.config.classifier.strategies;
    all.absorb(train_viewmaker(ctx, None)?);
    for &s in strategies {
        all.absorb(train_classifier_cmd(ctx, s)?);
        all.absorb(evaluate_cmd(ctx, s, None)?);
    }
    all.absorb(compare_dtw(ctx, None, None)?);
    all.absorb(report_cmd(ctx, &[])?);
    Ok(all)
}
