//! Ingestion and preparation of discharges: resampling irregular raw signals
//! onto a uniform grid, length filtering, tail truncation and z-score
//! normalization. Corpus I/O, the dataset importer and the synthetic
//! generator live in submodules.

mod corpus;
mod import;
mod synthetic;

pub use corpus::{read_corpus, write_corpus, RECORD_EXTENSION, SCHEMA_FILE};
pub use import::{import_exports, ColumnMapping, ImportConfig};
pub use synthetic::{generate_synthetic, generate_synthetic_with, SynthConfig};

use std::fs;
use std::path::Path;

use ndarray::{Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{Discharge, FeatureSchema, Machine, N_CHANNELS, N_PHYSICS};
use crate::error::{Error, Result};

/// Grid-time comparisons tolerate this much floating-point slack (ms).
const TIME_EPS: f64 = 1e-9;

/// Raw physics signals of one shot, each channel sampled on its own clock.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSeries {
    channels: Vec<Vec<(f64, f64)>>,
}

impl RawSeries {
    /// `channels[c]` holds `(time_ms, value)` pairs for physics channel `c`.
    pub fn new(channels: Vec<Vec<(f64, f64)>>) -> Result<Self> {
        let schema = FeatureSchema::standard();
        if channels.len() != N_PHYSICS {
            return Err(Error::Schema(format!(
                "raw series needs {N_PHYSICS} physics channels, found {}",
                channels.len()
            )));
        }
        for (c, samples) in channels.iter().enumerate() {
            let name = &schema.channels()[c].name;
            if samples.is_empty() {
                return Err(Error::InsufficientData(format!("channel `{name}` has no samples")));
            }
            for (i, &(t, v)) in samples.iter().enumerate() {
                if !t.is_finite() || !v.is_finite() {
                    return Err(Error::Schema(format!(
                        "channel `{name}` sample {i} is not finite ({t}, {v})"
                    )));
                }
                if i > 0 && t <= samples[i - 1].0 {
                    return Err(Error::Schema(format!(
                        "channel `{name}` timestamps not strictly increasing at sample {i} ({t} ms)"
                    )));
                }
            }
        }
        Ok(Self { channels })
    }

    pub fn channels(&self) -> &[Vec<(f64, f64)>] {
        &self.channels
    }

    /// Latest timestamp over all channels.
    pub fn duration_ms(&self) -> f64 {
        self.channels
            .iter()
            .filter_map(|c| c.last().map(|s| s.0))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Views a gridded discharge's physics channels as raw samples.
    pub fn from_discharge(d: &Discharge) -> Result<Self> {
        let channels = (0..N_PHYSICS)
            .map(|c| {
                (0..d.len())
                    .map(|t| (d.time_of(t), d.samples[[t, c]]))
                    .collect()
            })
            .collect();
        Self::new(channels)
    }
}

/// Forward-fills every channel onto the grid `0, step, 2·step, …` up to the
/// latest raw timestamp. Grid points before a channel's first sample take
/// that first value.
pub fn resample(raw: &RawSeries, grid_step_ms: f64) -> Result<Array2<f64>> {
    if !(grid_step_ms > 0.0 && grid_step_ms.is_finite()) {
        return Err(Error::Config(format!("grid step must be positive, got {grid_step_ms}")));
    }
    let schema = FeatureSchema::standard();
    let last = raw.duration_ms().max(0.0);
    let rows = (last / grid_step_ms + TIME_EPS).floor() as usize + 1;
    let mut out = Array2::zeros((rows, raw.channels.len()));
    for (c, samples) in raw.channels.iter().enumerate() {
        let first = samples
            .first()
            .ok_or_else(|| {
                Error::InsufficientData(format!("channel `{}` has no samples", schema.channels()[c].name))
            })?
            .1;
        let mut next = 0;
        let mut current = first;
        for t in 0..rows {
            let time = t as f64 * grid_step_ms;
            while next < samples.len() && samples[next].0 <= time + TIME_EPS {
                current = samples[next].1;
                next += 1;
            }
            out[[t, c]] = current;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// One mean/std per physics channel over the whole training corpus.
    ZscoreGlobal,
    /// Separate statistics per machine; machines absent from the training
    /// corpus fall back to the global statistics.
    ZscorePerMachine,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub grid_step_ms: f64,
    pub min_length_ms: f64,
    /// ν: dropped from the end of every shot.
    pub truncate_tail_ms: f64,
    pub normalization: Normalization,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            grid_step_ms: 5.0,
            min_length_ms: 125.0,
            truncate_tail_ms: 40.0,
            normalization: Normalization::ZscoreGlobal,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("grid_step_ms", self.grid_step_ms),
            ("min_length_ms", self.min_length_ms),
            ("truncate_tail_ms", self.truncate_tail_ms),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.truncate_tail_ms >= self.min_length_ms {
            return Err(Error::Config(format!(
                "truncate_tail_ms ({}) must be below min_length_ms ({})",
                self.truncate_tail_ms, self.min_length_ms
            )));
        }
        Ok(())
    }

    /// Steps kept from a shot of the given duration, or `None` if it is too short.
    fn kept_steps(&self, duration_ms: f64) -> Option<usize> {
        if duration_ms + TIME_EPS < self.min_length_ms {
            return None;
        }
        let steps = ((duration_ms - self.truncate_tail_ms) / self.grid_step_ms + TIME_EPS).floor();
        (steps >= 1.0).then_some(steps as usize)
    }
}

/// Identity and label fields that travel with a raw shot.
#[derive(Debug, Clone, PartialEq)]
pub struct ShotMeta {
    pub id: String,
    pub machine: Machine,
    pub disruptive: bool,
    pub disruption_time_ms: Option<f64>,
}

fn assemble(physics: Array2<f64>, meta: &ShotMeta, grid_step_ms: f64) -> Discharge {
    let rows = physics.nrows();
    let mut samples = Array2::zeros((rows, N_CHANNELS));
    samples
        .slice_mut(ndarray::s![.., ..N_PHYSICS])
        .assign(&physics.slice(ndarray::s![.., ..N_PHYSICS]));
    samples.column_mut(meta.machine.indicator_channel()).fill(1.0);
    // Truncation may cut past the recorded disruption time; the label keeps
    // pointing at the end of what remains.
    let end = rows as f64 * grid_step_ms;
    Discharge {
        id: meta.id.clone(),
        machine: meta.machine,
        samples,
        grid_step_ms,
        disruptive: meta.disruptive,
        disruption_time_ms: meta.disruption_time_ms.map(|t| t.min(end)),
    }
}

/// Resamples, filters by length, drops the final ν and appends indicator
/// channels. Returns `None` for shots shorter than `min_length_ms`.
///
/// When `cfg.normalization` is not `None`, `stats` must be supplied; they are
/// fit on the training corpus with [`NormStats::fit`].
pub fn preprocess(
    raw: &RawSeries,
    meta: &ShotMeta,
    cfg: &PreprocessConfig,
    stats: Option<&NormStats>,
) -> Result<Option<Discharge>> {
    cfg.validate()?;
    if meta.disruptive != meta.disruption_time_ms.is_some() {
        return Err(Error::Schema(format!(
            "shot `{}`: disruption time must be present iff the shot is disruptive",
            meta.id
        )));
    }
    let Some(kept) = cfg.kept_steps(raw.duration_ms()) else {
        return Ok(None);
    };
    let grid = resample(raw, cfg.grid_step_ms)?;
    let kept = kept.min(grid.nrows());
    let d = assemble(grid.slice(ndarray::s![..kept, ..]).to_owned(), meta, cfg.grid_step_ms);
    normalize_one(d, cfg, stats).map(Some)
}

/// Length filter and ν truncation for a shot that is already on the grid.
pub fn prepare(d: &Discharge, cfg: &PreprocessConfig) -> Result<Option<Discharge>> {
    cfg.validate()?;
    if (d.grid_step_ms - cfg.grid_step_ms).abs() > TIME_EPS {
        // Different grid: go through the raw path so the output lands on ours.
        let raw = RawSeries::from_discharge(d)?;
        let meta = ShotMeta {
            id: d.id.clone(),
            machine: d.machine,
            disruptive: d.disruptive,
            disruption_time_ms: d.disruption_time_ms,
        };
        let cfg = PreprocessConfig {
            normalization: Normalization::None,
            ..*cfg
        };
        return preprocess(&raw, &meta, &cfg, None);
    }
    let Some(kept) = cfg.kept_steps(d.duration_ms()) else {
        return Ok(None);
    };
    let kept = kept.min(d.len());
    let meta = ShotMeta {
        id: d.id.clone(),
        machine: d.machine,
        disruptive: d.disruptive,
        disruption_time_ms: d.disruption_time_ms,
    };
    Ok(Some(assemble(
        d.samples.slice(ndarray::s![..kept, ..]).to_owned(),
        &meta,
        d.grid_step_ms,
    )))
}

/// [`prepare`] over a corpus in parallel; dropped shots are reported by id.
pub fn prepare_corpus(corpus: &[Discharge], cfg: &PreprocessConfig) -> Result<(Vec<Discharge>, Vec<String>)> {
    let results: Vec<Result<Option<Discharge>>> = corpus.par_iter().map(|d| prepare(d, cfg)).collect();
    let mut kept = Vec::with_capacity(corpus.len());
    let mut dropped = Vec::new();
    for (d, r) in corpus.iter().zip(results) {
        match r? {
            Some(p) => kept.push(p),
            None => dropped.push(d.id.clone()),
        }
    }
    Ok((kept, dropped))
}

fn normalize_one(d: Discharge, cfg: &PreprocessConfig, stats: Option<&NormStats>) -> Result<Discharge> {
    match (cfg.normalization, stats) {
        (Normalization::None, _) => Ok(d),
        (_, Some(s)) => Ok(s.apply(&d)),
        (_, None) => Err(Error::Config(
            "normalization requested but no statistics were supplied".into(),
        )),
    }
}

/// Mean and standard deviation per channel. Indicator channels carry the
/// identity transform (mean 0, std 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    fn identity() -> Self {
        Self {
            mean: vec![0.0; N_CHANNELS],
            std: vec![1.0; N_CHANNELS],
        }
    }

    fn fit<'a>(shots: impl Iterator<Item = &'a Discharge> + Clone, label: &str, warnings: &mut Vec<String>) -> Self {
        let schema = FeatureSchema::standard();
        let mut out = Self::identity();
        let count: usize = shots.clone().map(|d| d.len()).sum();
        if count == 0 {
            return out;
        }
        for c in schema.physics_channels() {
            // Two passes for accuracy; the corpus is in memory anyway.
            let sum: f64 = shots.clone().map(|d| d.samples.column(c).sum()).sum();
            let mean = sum / count as f64;
            let ss: f64 = shots
                .clone()
                .map(|d| d.samples.column(c).iter().map(|v| (v - mean).powi(2)).sum::<f64>())
                .sum();
            let std = (ss / count as f64).sqrt();
            out.mean[c] = mean;
            if std > 0.0 && std.is_finite() {
                out.std[c] = std;
            } else {
                let msg = format!(
                    "channel `{}` has zero variance{label}; using std = 1",
                    schema.channels()[c].name
                );
                log::warn!("{msg}");
                warnings.push(msg);
            }
        }
        out
    }

    fn apply(&self, samples: &mut Array2<f64>) {
        for (c, mut col) in samples.axis_iter_mut(Axis(1)).enumerate() {
            let (m, s) = (self.mean[c], self.std[c]);
            col.mapv_inplace(|v| (v - m) / s);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MachineChannelStats {
    pub machine: Machine,
    pub stats: ChannelStats,
}

/// Normalization statistics fit on a training corpus and persisted with the
/// models trained on it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub normalization: Normalization,
    pub global: ChannelStats,
    pub per_machine: Vec<MachineChannelStats>,
    /// Zero-variance substitutions made while fitting.
    pub warnings: Vec<String>,
}

impl NormStats {
    pub fn identity() -> Self {
        Self {
            normalization: Normalization::None,
            global: ChannelStats::identity(),
            per_machine: Vec::new(),
            warnings: Vec::new(),
        }
    }

    pub fn fit(corpus: &[Discharge], normalization: Normalization) -> Result<Self> {
        if normalization == Normalization::None {
            return Ok(Self::identity());
        }
        if corpus.is_empty() {
            return Err(Error::InsufficientData(
                "cannot fit normalization statistics on an empty corpus".into(),
            ));
        }
        let mut warnings = Vec::new();
        let global = ChannelStats::fit(corpus.iter(), "", &mut warnings);
        let mut per_machine = Vec::new();
        if normalization == Normalization::ZscorePerMachine {
            for m in Machine::ALL {
                if corpus.iter().any(|d| d.machine == m) {
                    let label = format!(" on {m}");
                    let stats = ChannelStats::fit(corpus.iter().filter(|d| d.machine == m), &label, &mut warnings);
                    per_machine.push(MachineChannelStats { machine: m, stats });
                }
            }
        }
        Ok(Self {
            normalization,
            global,
            per_machine,
            warnings,
        })
    }

    fn stats_for(&self, machine: Machine) -> &ChannelStats {
        match self.normalization {
            Normalization::ZscorePerMachine => self
                .per_machine
                .iter()
                .find(|s| s.machine == machine)
                .map(|s| &s.stats)
                .unwrap_or(&self.global),
            _ => &self.global,
        }
    }

    pub fn apply(&self, d: &Discharge) -> Discharge {
        let mut out = d.clone();
        if self.normalization != Normalization::None {
            self.stats_for(d.machine).apply(&mut out.samples);
        }
        out
    }

    pub fn apply_corpus(&self, corpus: &[Discharge]) -> Vec<Discharge> {
        corpus.par_iter().map(|d| self.apply(d)).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
