//! Window classifiers producing per-step disruptivity: a fully convolutional
//! network and a recurrent-encoding attention classifier, trained with binary
//! cross-entropy on optionally augmented windows.

use std::collections::HashMap;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augbase::{self, AugSpec};
use crate::domain::Discharge;
use crate::error::{Error, Result};
use crate::evaluation::ScoreSeries;
use crate::gradnet::layers::{Activation, AttentionBlock, Conv1d, Dense, LayerNorm, Lstm};
use crate::gradnet::{Checkpoint, Gradients, Graph, LayerSpec, Model, Optimizer, OptimizerConfig, ParamStore, Var};
use crate::rng::Rng;
use crate::viewmaker::ViewmakerModel;

const TIME_EPS: f64 = 1e-9;
/// Scores are clamped into `[SCORE_EPS, 1 - SCORE_EPS]` so they stay strictly
/// inside (0, 1) even when the sigmoid saturates.
const SCORE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierKind {
    Fcn,
    RecurrentAttention,
}

impl std::str::FromStr for ClassifierKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "fcn" => Ok(Self::Fcn),
            "recurrent_attention" | "lstmformer" => Ok(Self::RecurrentAttention),
            other => Err(Error::Config(format!("unknown classifier kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierSpec {
    pub kind: ClassifierKind,
    pub window_length: usize,
    pub fcn_widths: [usize; 3],
    pub fcn_kernels: [usize; 3],
    pub hidden: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ff_width: usize,
}

impl Default for ClassifierSpec {
    fn default() -> Self {
        Self {
            kind: ClassifierKind::Fcn,
            window_length: 32,
            fcn_widths: [128, 256, 128],
            fcn_kernels: [8, 5, 3],
            hidden: 32,
            blocks: 4,
            heads: 4,
            ff_width: 64,
        }
    }
}

impl ClassifierSpec {
    pub fn validate(&self) -> Result<()> {
        if self.window_length == 0 {
            return Err(Error::Config("window_length must be positive".into()));
        }
        match self.kind {
            ClassifierKind::Fcn => {
                if self.fcn_widths.contains(&0) || self.fcn_kernels.contains(&0) {
                    return Err(Error::Config("FCN widths and kernels must be positive".into()));
                }
            }
            ClassifierKind::RecurrentAttention => {
                if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
                    return Err(Error::Config(format!(
                        "hidden width {} must be a positive multiple of heads {}",
                        self.hidden, self.heads
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum Body {
    Fcn {
        convs: Vec<(Conv1d, LayerNorm)>,
    },
    RecurrentAttention {
        lstm: Lstm,
        norm: LayerNorm,
        blocks: Vec<AttentionBlock>,
    },
}

#[derive(Debug, Clone)]
pub struct Classifier {
    spec: ClassifierSpec,
    store: ParamStore,
    body: Body,
    head: Dense,
}

impl Classifier {
    pub fn new(spec: ClassifierSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let d = crate::domain::N_CHANNELS;
        let mut store = ParamStore::new();
        let (body, width) = match spec.kind {
            ClassifierKind::Fcn => {
                let mut convs = Vec::new();
                let mut input = d;
                for (i, (&w, &k)) in spec.fcn_widths.iter().zip(&spec.fcn_kernels).enumerate() {
                    let conv = Conv1d::new(&mut store, &format!("conv{i}"), input, w, k, rng);
                    let norm = LayerNorm::new(&mut store, &format!("norm{i}"), w);
                    convs.push((conv, norm));
                    input = w;
                }
                (Body::Fcn { convs }, input)
            }
            ClassifierKind::RecurrentAttention => {
                let lstm = Lstm::new(&mut store, "lstm", d, spec.hidden, rng);
                let norm = LayerNorm::new(&mut store, "norm", spec.hidden);
                let blocks = (0..spec.blocks)
                    .map(|b| AttentionBlock::new(&mut store, &format!("block{b}"), spec.hidden, spec.heads, spec.ff_width, rng))
                    .collect::<Result<Vec<_>>>()?;
                (Body::RecurrentAttention { lstm, norm, blocks }, spec.hidden)
            }
        };
        let head = Dense::new(&mut store, "head", width, 1, rng);
        Ok(Self { spec, store, body, head })
    }

    pub fn spec(&self) -> &ClassifierSpec {
        &self.spec
    }

    /// `W × d` window to a `1 × 1` logit.
    pub fn logit(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let s = &self.store;
        let pooled = match &self.body {
            Body::Fcn { convs } => {
                let mut h = x;
                for (conv, norm) in convs {
                    h = conv.forward(g, s, h)?;
                    h = norm.forward(g, s, h)?;
                    h = Activation::Relu.apply(g, h)?;
                }
                g.mean_rows(h)?
            }
            Body::RecurrentAttention { lstm, norm, blocks } => {
                let mut h = lstm.forward(g, s, x)?;
                h = norm.forward(g, s, h)?;
                for b in blocks {
                    h = b.forward(g, s, h)?;
                }
                let rows = g.shape(h).0;
                g.slice_rows(h, rows - 1, rows)?
            }
        };
        self.head.forward(g, s, pooled)
    }

    /// Disruption probability of one window, strictly inside (0, 1).
    pub fn score(&self, window: ArrayView2<'_, f64>) -> Result<f64> {
        let mut g = Graph::new();
        let x = g.input(window.to_owned())?;
        let z = self.logit(&mut g, x)?;
        Ok(sigmoid(g.value(z)[[0, 0]]).clamp(SCORE_EPS, 1.0 - SCORE_EPS))
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::capture("classifier", &self.spec, self)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.model != "classifier" {
            return Err(Error::Schema(format!("expected a classifier checkpoint, found `{}`", ck.model)));
        }
        let mut model = Self::new(ck.config()?, &mut Rng::new(0))?;
        ck.restore(&mut model)?;
        Ok(model)
    }
}

impl Model for Classifier {
    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn layer_specs(&self) -> Vec<LayerSpec> {
        let mut out = Vec::new();
        match &self.body {
            Body::Fcn { convs } => {
                for (conv, norm) in convs {
                    out.push(conv.spec());
                    out.push(norm.spec());
                    out.push(LayerSpec::Activation {
                        function: Activation::Relu,
                    });
                }
            }
            Body::RecurrentAttention { lstm, norm, blocks } => {
                out.push(lstm.spec());
                out.push(norm.spec());
                out.extend(blocks.iter().map(|b| b.spec()));
            }
        }
        out.push(self.head.spec());
        out.push(LayerSpec::Activation {
            function: Activation::Sigmoid,
        });
        out
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledWindow {
    pub window: Array2<f64>,
    pub label: bool,
    pub shot_id: String,
    /// Time of the window's last sample.
    pub end_time_ms: f64,
}

/// Whether a window ending at `end_time_ms` lies within τ(machine) of the
/// shot's disruption.
pub fn is_pre_disruptive(d: &Discharge, end_time_ms: f64) -> bool {
    match (d.disruptive, d.disruption_time_ms) {
        (true, Some(t)) => end_time_ms + TIME_EPS >= t - d.machine.stats().tau_ms && end_time_ms <= t + TIME_EPS,
        _ => false,
    }
}

/// Sliding windows of `window_length` steps, placed backwards from the end
/// of each shot every `stride` steps (so the final window always ends at the
/// last sample). Shots shorter than the window are skipped with a warning.
pub fn windowize(corpus: &[Discharge], window_length: usize, stride: usize) -> Result<Vec<LabeledWindow>> {
    if window_length == 0 || stride == 0 {
        return Err(Error::Config("window length and stride must be positive".into()));
    }
    let mut out = Vec::new();
    for d in corpus {
        if d.len() < window_length {
            log::warn!("shot `{}` has {} steps, shorter than the {window_length}-step window; skipped", d.id, d.len());
            continue;
        }
        let last_start = d.len() - window_length;
        let mut starts: Vec<usize> = (0..=last_start / stride).map(|k| last_start - k * stride).collect();
        starts.reverse();
        for s in starts {
            let end_time_ms = d.time_of(s + window_length - 1);
            out.push(LabeledWindow {
                window: d.samples.slice(ndarray::s![s..s + window_length, ..]).to_owned(),
                label: is_pre_disruptive(d, end_time_ms),
                shot_id: d.id.clone(),
                end_time_ms,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy)]
pub enum Augmentation<'a> {
    None,
    Tsaug(&'a AugSpec),
    Viewmaker(&'a ViewmakerModel),
}

impl Augmentation<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Augmentation::None => "none",
            Augmentation::Tsaug(_) => "tsaug",
            Augmentation::Viewmaker(_) => "viewmaker",
        }
    }

    fn apply(&self, x: &Array2<f64>, rng: &mut Rng) -> Result<Array2<f64>> {
        match self {
            Augmentation::None => Ok(x.clone()),
            // Crops would change the window length and could cut away the
            // region that defines the label.
            Augmentation::Tsaug(spec) => augbase::apply(&spec.without_crop(), x.view(), rng),
            Augmentation::Viewmaker(vm) => vm.make_view(x.view(), rng),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Share of each batch drawn from positive windows (0.25 gives 1:3).
    pub positive_fraction: f64,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 32,
            positive_fraction: 0.25,
            optimizer: OptimizerConfig::adam(1e-3).with_clip_norm(5.0),
            seed: 0,
        }
    }
}

impl ClassifierTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.positive_fraction) {
            return Err(Error::Config(format!(
                "positive_fraction must be in [0, 1], got {}",
                self.positive_fraction
            )));
        }
        self.optimizer.validate()
    }
}

/// Mean binary cross-entropy of `model` over `windows` and its gradient.
/// Windows are processed in parallel and reduced in input order.
pub fn bce_gradients(model: &Classifier, windows: &[Array2<f64>], targets: &[f64]) -> Result<(f64, Gradients)> {
    if windows.len() != targets.len() || windows.is_empty() {
        return Err(Error::shape("bce", format!("{} windows for {} targets", windows.len(), targets.len())));
    }
    let n = windows.len() as f64;
    let parts = windows
        .par_iter()
        .zip(targets)
        .map(|(w, &y)| -> Result<(f64, Gradients)> {
            let mut g = Graph::new();
            let x = g.input(w.clone())?;
            let z = model.logit(&mut g, x)?;
            let zv = g.value(z)[[0, 0]];
            let loss = zv.max(0.0) - zv * y + (-zv.abs()).exp().ln_1p();
            g.backward_with(z, Array2::from_elem((1, 1), (sigmoid(zv) - y) / n))?;
            Ok((loss / n, g.gradients(model.params())?))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = 0.0;
    let mut grads = Gradients::zeros_like(model.params());
    for (l, g) in &parts {
        total += l;
        grads.add_assign(g)?;
    }
    Ok((total, grads))
}

/// Trains a fresh classifier. Batches oversample positive windows to
/// `positive_fraction`; augmentation is redrawn for every batch from its own
/// random stream, so a viewmaker that returns its input reproduces training
/// without augmentation exactly. Returns the model and the per-step loss.
pub fn train_classifier(
    spec: &ClassifierSpec,
    windows: &[LabeledWindow],
    aug: Augmentation<'_>,
    cfg: &ClassifierTrainConfig,
) -> Result<(Classifier, Vec<f64>)> {
    cfg.validate()?;
    if windows.is_empty() {
        return Err(Error::InsufficientData("no training windows".into()));
    }
    if let Some(w) = windows.iter().find(|w| w.window.nrows() != spec.window_length) {
        return Err(Error::shape(
            "train_classifier",
            format!("window from `{}` has {} steps, spec expects {}", w.shot_id, w.window.nrows(), spec.window_length),
        ));
    }
    let root = Rng::new(cfg.seed);
    let mut model = Classifier::new(*spec, &mut root.substream("classifier-init"))?;
    let mut opt = Optimizer::new(cfg.optimizer, model.params())?;
    let positives: Vec<usize> = (0..windows.len()).filter(|&i| windows[i].label).collect();
    let negatives: Vec<usize> = (0..windows.len()).filter(|&i| !windows[i].label).collect();
    let n_pos = if negatives.is_empty() {
        cfg.batch_size
    } else if positives.is_empty() {
        log::warn!("no positive windows; training on negatives only");
        0
    } else {
        ((cfg.batch_size as f64 * cfg.positive_fraction).round() as usize).min(cfg.batch_size)
    };
    let batches = root.substream("classifier-batches");
    let augment = root.substream("classifier-augment");
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut rng = batches.fork(step as u64);
        let mut picks = Vec::with_capacity(cfg.batch_size);
        for k in 0..cfg.batch_size {
            let pool = if k < n_pos { &positives } else { &negatives };
            picks.push(pool[rng.below(pool.len())]);
        }
        let mut aug_rng = augment.fork(step as u64);
        let inputs = picks
            .iter()
            .map(|&i| aug.apply(&windows[i].window, &mut aug_rng))
            .collect::<Result<Vec<_>>>()?;
        let targets: Vec<f64> = picks.iter().map(|&i| if windows[i].label { 1.0 } else { 0.0 }).collect();
        let (loss, grads) = bce_gradients(&model, &inputs, &targets).map_err(|e| match e {
            Error::NonFinite { op } => Error::Diverged {
                step,
                detail: format!("non-finite value in `{op}`"),
            },
            other => other,
        })?;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("loss is {loss}"),
            });
        }
        opt.step(model.params_mut(), &grads)?;
        curve.push(loss);
    }
    Ok((model, curve))
}

/// Stride-1 scores aligned to window end times: the score at time `t` uses
/// only samples at or before `t`. Output length is `T - W + 1`.
pub fn disruptivity(model: &Classifier, shot: &Discharge) -> Result<ScoreSeries> {
    let w = model.spec.window_length;
    if shot.len() < w {
        return Err(Error::InsufficientData(format!(
            "shot `{}` has {} steps, shorter than the {w}-step window",
            shot.id,
            shot.len()
        )));
    }
    let scores = (0..=shot.len() - w)
        .into_par_iter()
        .map(|s| model.score(shot.samples.slice(ndarray::s![s..s + w, ..])))
        .collect::<Result<Vec<_>>>()?;
    ScoreSeries::uniform(shot.time_of(w - 1), shot.grid_step_ms, scores)
}

/// Writes `shot,time_ms,score` rows, shots in the given order.
pub fn write_disruptivity(path: &Path, series: &[(String, ScoreSeries)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["shot", "time_ms", "score"]).map_err(|e| csv_error(path, e))?;
    for (id, s) in series {
        for (t, v) in s.times_ms.iter().zip(&s.scores) {
            w.write_record([id.as_str(), &format!("{t:e}"), &format!("{v:e}")])
                .map_err(|e| csv_error(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_disruptivity(path: &Path) -> Result<HashMap<String, ScoreSeries>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut raw: Vec<(String, Vec<f64>, Vec<f64>)> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let bad = |msg: String| Error::Parse {
            path: path.into(),
            line: i + 2,
            msg,
        };
        if rec.len() != 3 {
            return Err(bad(format!("expected 3 fields, found {}", rec.len())));
        }
        let t: f64 = rec[1].parse().map_err(|_| bad(format!("bad time `{}`", &rec[1])))?;
        let v: f64 = rec[2].parse().map_err(|_| bad(format!("bad score `{}`", &rec[2])))?;
        let slot = *index.entry(rec[0].to_string()).or_insert_with(|| {
            raw.push((rec[0].to_string(), Vec::new(), Vec::new()));
            raw.len() - 1
        });
        raw[slot].1.push(t);
        raw[slot].2.push(v);
    }
    raw.into_iter()
        .map(|(id, t, v)| {
            let s = ScoreSeries::new(t, v).map_err(|e| Error::Parse {
                path: path.into(),
                line: 0,
                msg: format!("shot `{id}`: {e}"),
            })?;
            Ok((id, s))
        })
        .collect()
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Parse {
        path: path.into(),
        line: e.position().map(|p| p.line() as usize).unwrap_or(0),
        msg: e.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Machine;
    use crate::pipeline::generate_synthetic;
    use crate::viewmaker::ViewmakerConfig;

    fn toy_fcn() -> ClassifierSpec {
        ClassifierSpec {
            window_length: 8,
            fcn_widths: [4, 6, 4],
            fcn_kernels: [3, 2, 3],
            ..Default::default()
        }
    }

    fn toy_ra() -> ClassifierSpec {
        ClassifierSpec {
            kind: ClassifierKind::RecurrentAttention,
            window_length: 8,
            hidden: 8,
            blocks: 2,
            heads: 2,
            ff_width: 8,
            ..Default::default()
        }
    }

    #[test]
    fn windows_and_labels() {
        let corpus = generate_synthetic(6, Machine::CMod, 0.5, &Rng::new(1)).unwrap();
        for d in &corpus {
            let ws = windowize(std::slice::from_ref(d), 8, 1).unwrap();
            assert_eq!(ws.len(), d.len() - 7);
            let positives = ws.iter().filter(|w| w.label).count();
            assert_eq!(positives, if d.disruptive { 10 } else { 0 });
            assert!(ws.iter().rev().take(positives).all(|w| w.label));
            let one = windowize(std::slice::from_ref(d), 8, d.len()).unwrap();
            assert_eq!(one.len(), 1);
            assert_eq!(one[0].end_time_ms, d.time_of(d.len() - 1));
        }
        let short = windowize(&corpus, 10_000, 1).unwrap();
        assert!(short.is_empty());
    }

    #[test]
    fn scores_are_causal_and_in_range() {
        let d = &generate_synthetic(1, Machine::DIIID, 1.0, &Rng::new(2)).unwrap()[0];
        for spec in [toy_fcn(), toy_ra()] {
            let m = Classifier::new(spec, &mut Rng::new(3)).unwrap();
            let full = disruptivity(&m, d).unwrap();
            assert_eq!(full.len(), d.len() - 7);
            assert_eq!(full.times_ms[0], d.time_of(7));
            assert!(full.scores.iter().all(|&s| s > 0.0 && s < 1.0));
            let mut cut = d.clone();
            cut.samples = d.samples.slice(ndarray::s![..30, ..]).to_owned();
            let part = disruptivity(&m, &cut).unwrap();
            assert_eq!(&full.scores[..part.len()], &part.scores[..]);
            let mut tiny = d.clone();
            tiny.samples = d.samples.slice(ndarray::s![..5, ..]).to_owned();
            assert!(disruptivity(&m, &tiny).is_err());
        }
    }

    #[test]
    fn constant_weight_model_gives_constant_scores() {
        let d = &generate_synthetic(1, Machine::DIIID, 1.0, &Rng::new(2)).unwrap()[0];
        let mut m = Classifier::new(toy_fcn(), &mut Rng::new(3)).unwrap();
        let head_w = m.head.weight;
        m.params_mut().get_mut(head_w).value.fill(0.0);
        let s = disruptivity(&m, d).unwrap();
        assert!(s.scores.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn single_window_is_memorized() {
        let corpus = generate_synthetic(1, Machine::DIIID, 1.0, &Rng::new(4)).unwrap();
        let ws = windowize(&corpus, 8, corpus[0].len()).unwrap();
        let cfg = ClassifierTrainConfig {
            steps: 150,
            batch_size: 4,
            optimizer: OptimizerConfig::adam(1e-2),
            ..Default::default()
        };
        let (_, curve) = train_classifier(&toy_fcn(), &ws, Augmentation::None, &cfg).unwrap();
        assert!(curve.last().unwrap() < &0.01, "{:?}", curve.last());
    }

    #[test]
    fn identity_views_match_no_augmentation() {
        let corpus = generate_synthetic(4, Machine::DIIID, 0.5, &Rng::new(5)).unwrap();
        let ws = windowize(&corpus, 8, 4).unwrap();
        let cfg = ClassifierTrainConfig {
            steps: 5,
            batch_size: 4,
            ..Default::default()
        };
        let vcfg = ViewmakerConfig {
            hidden: 4,
            blocks: 1,
            heads: 1,
            ff_width: 4,
            ..Default::default()
        };
        let mut vm = ViewmakerModel::new(vcfg, &mut Rng::new(1)).unwrap();
        vm.zero_output_heads();
        let (a, ca) = train_classifier(&toy_ra(), &ws, Augmentation::None, &cfg).unwrap();
        let (b, cb) = train_classifier(&toy_ra(), &ws, Augmentation::Viewmaker(&vm), &cfg).unwrap();
        assert_eq!(a.params(), b.params());
        assert_eq!(ca, cb);
        let spec = AugSpec::default();
        let (c, _) = train_classifier(&toy_ra(), &ws, Augmentation::Tsaug(&spec), &cfg).unwrap();
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn checkpoint_and_disruptivity_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = Classifier::new(toy_ra(), &mut Rng::new(3)).unwrap();
        let back = Classifier::from_checkpoint(&m.checkpoint().unwrap()).unwrap();
        assert_eq!(back.params(), m.params());
        let d = &generate_synthetic(2, Machine::DIIID, 1.0, &Rng::new(2)).unwrap();
        let series: Vec<(String, ScoreSeries)> =
            d.iter().map(|s| (s.id.clone(), disruptivity(&m, s).unwrap())).collect();
        let path = dir.path().join("scores.csv");
        write_disruptivity(&path, &series).unwrap();
        let read = read_disruptivity(&path).unwrap();
        for (id, s) in &series {
            assert_eq!(&read[id], s);
        }
    }
}
