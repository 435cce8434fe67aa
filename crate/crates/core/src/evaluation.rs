//! Shot-level evaluation of disruptivity traces: a two-threshold hysteresis
//! alarm, outcome categories with a required warning time, recall/precision/F2
//! at an operating point and ROC AUC over a threshold sweep.

use std::collections::HashMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::Discharge;
use crate::error::{Error, Result};

const TIME_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlarmConfig {
    pub t_low: f64,
    pub t_high: f64,
    /// h: consecutive-ish steps above `t_high` needed to fire.
    pub hysteresis: usize,
    /// Δt_req: warning time the mitigation system needs.
    pub dt_req_ms: f64,
    pub grid_step_ms: f64,
}

impl Default for AlarmConfig {
    fn default() -> Self {
        Self {
            t_low: 0.25,
            t_high: 0.5,
            hysteresis: 2,
            dt_req_ms: 40.0,
            grid_step_ms: 5.0,
        }
    }
}

impl AlarmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.t_low && self.t_low < self.t_high && self.t_high <= 1.0) {
            return Err(Error::Config(format!(
                "need 0 <= t_low < t_high <= 1, got t_low = {}, t_high = {}",
                self.t_low, self.t_high
            )));
        }
        if self.hysteresis == 0 {
            return Err(Error::Config("hysteresis must be at least 1".into()));
        }
        if !(self.dt_req_ms >= 0.0 && self.grid_step_ms > 0.0) {
            return Err(Error::Config("dt_req_ms must be >= 0 and grid_step_ms > 0".into()));
        }
        Ok(())
    }
}

/// Disruptivity scores at increasing times (ms from shot start).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSeries {
    pub times_ms: Vec<f64>,
    pub scores: Vec<f64>,
}

impl ScoreSeries {
    pub fn new(times_ms: Vec<f64>, scores: Vec<f64>) -> Result<Self> {
        if times_ms.len() != scores.len() {
            return Err(Error::shape(
                "score_series",
                format!("{} times for {} scores", times_ms.len(), scores.len()),
            ));
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite {
                op: format!("score {i}"),
            });
        }
        if times_ms.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Schema("score times must be strictly increasing".into()));
        }
        Ok(Self { times_ms, scores })
    }

    /// Scores at `start + k·step`.
    pub fn uniform(start_ms: f64, step_ms: f64, scores: Vec<f64>) -> Result<Self> {
        let times = (0..scores.len()).map(|k| start_ms + k as f64 * step_ms).collect();
        Self::new(times, scores)
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Alarm {
    pub fired: bool,
    pub alarm_time_ms: Option<f64>,
}

/// Hysteresis counter: a score ≥ `t_high` increments it, a score ≤ `t_low`
/// resets it to zero, anything in between holds it. The alarm fires at the
/// first step where the counter reaches `h`. The series is taken to end one
/// grid step after its last score, and steps later than `dt_req` before that
/// end are not evaluated.
pub fn run_alarm(series: &ScoreSeries, cfg: &AlarmConfig) -> Result<Alarm> {
    cfg.validate()?;
    let last = *series
        .times_ms
        .last()
        .ok_or_else(|| Error::InsufficientData("empty score series".into()))?;
    let cutoff = last + cfg.grid_step_ms - cfg.dt_req_ms;
    let mut counter = 0usize;
    for (&t, &s) in series.times_ms.iter().zip(&series.scores) {
        if t > cutoff + TIME_EPS {
            break;
        }
        if s >= cfg.t_high {
            counter += 1;
        } else if s <= cfg.t_low {
            counter = 0;
        }
        if counter >= cfg.hysteresis {
            return Ok(Alarm {
                fired: true,
                alarm_time_ms: Some(t),
            });
        }
    }
    Ok(Alarm {
        fired: false,
        alarm_time_ms: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Category {
    TP,
    FP,
    TN,
    FN,
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Category::TP => "TP",
            Category::FP => "FP",
            Category::TN => "TN",
            Category::FN => "FN",
        })
    }
}

/// A disruptive shot counts as caught only when the alarm leaves at least
/// `dt_req` before the disruption; later alarms are misses.
pub fn categorize(disruptive: bool, alarm: &Alarm, disruption_time_ms: Option<f64>, cfg: &AlarmConfig) -> Category {
    match (disruptive, alarm.alarm_time_ms) {
        (true, Some(t)) => match disruption_time_ms {
            Some(d) if t <= d - cfg.dt_req_ms + TIME_EPS => Category::TP,
            _ => Category::FN,
        },
        (true, None) => Category::FN,
        (false, Some(_)) => Category::FP,
        (false, None) => Category::TN,
    }
}

/// `5PR / (4P + R)`, or 0 when both are 0.
pub fn f2(precision: f64, recall: f64) -> f64 {
    let denom = 4.0 * precision + recall;
    if denom == 0.0 {
        0.0
    } else {
        5.0 * precision * recall / denom
    }
}

/// One shot's scores and ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredShot {
    pub id: String,
    pub scores: ScoreSeries,
    pub disruptive: bool,
    pub disruption_time_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShotOutcome {
    pub id: String,
    pub disruptive: bool,
    pub predicted_positive: bool,
    pub alarm_time_ms: Option<f64>,
    pub category: Category,
}

fn outcome(shot: &ScoredShot, cfg: &AlarmConfig) -> Result<ShotOutcome> {
    let alarm = run_alarm(&shot.scores, cfg)?;
    Ok(ShotOutcome {
        id: shot.id.clone(),
        disruptive: shot.disruptive,
        predicted_positive: alarm.fired,
        alarm_time_ms: alarm.alarm_time_ms,
        category: categorize(shot.disruptive, &alarm, shot.disruption_time_ms, cfg),
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Counts {
    fn add(&mut self, c: Category) {
        match c {
            Category::TP => self.tp += 1,
            Category::FP => self.fp += 1,
            Category::TN => self.tn += 1,
            Category::FN => self.fn_ += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    fn rate(num: usize, den: usize) -> f64 {
        if den == 0 {
            0.0
        } else {
            num as f64 / den as f64
        }
    }

    pub fn tpr(&self) -> f64 {
        Self::rate(self.tp, self.tp + self.fn_)
    }

    pub fn fpr(&self) -> f64 {
        Self::rate(self.fp, self.fp + self.tn)
    }

    pub fn precision(&self) -> f64 {
        Self::rate(self.tp, self.tp + self.fp)
    }
}

fn counts_at(shots: &[ScoredShot], cfg: &AlarmConfig) -> Result<Counts> {
    let mut counts = Counts::default();
    for s in shots {
        counts.add(outcome(s, cfg)?.category);
    }
    Ok(counts)
}

/// Trapezoid area under (FPR, TPR) points after adding (0,0) and (1,1) and
/// sorting by FPR, then TPR.
pub fn trapezoid_auc(points: &[(f64, f64)]) -> f64 {
    let mut pts: Vec<(f64, f64)> = Vec::with_capacity(points.len() + 2);
    pts.push((0.0, 0.0));
    pts.extend_from_slice(points);
    pts.push((1.0, 1.0));
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    pts.windows(2)
        .map(|w| (w[1].0 - w[0].0) * 0.5 * (w[0].1 + w[1].1))
        .sum()
}

/// Sweeps `t_high` over `k / (grid_size + 1)`, `k = 1..=grid_size`, with
/// `t_low = t_high / 2` and the template's `h` and `dt_req`.
pub fn sweep_auc(shots: &[ScoredShot], template: &AlarmConfig, grid_size: usize) -> Result<(f64, Vec<(f64, f64)>)> {
    template.validate()?;
    let pos = shots.iter().filter(|s| s.disruptive).count();
    if pos == 0 || pos == shots.len() {
        return Err(Error::InsufficientData(
            "AUC needs at least one disruptive and one non-disruptive shot".into(),
        ));
    }
    if grid_size == 0 {
        return Err(Error::Config("AUC grid size must be positive".into()));
    }
    let points = (1..=grid_size)
        .into_par_iter()
        .map(|k| {
            let t_high = k as f64 / (grid_size + 1) as f64;
            let cfg = AlarmConfig {
                t_high,
                t_low: t_high / 2.0,
                ..*template
            };
            counts_at(shots, &cfg).map(|c| (c.fpr(), c.tpr()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((trapezoid_auc(&points), points))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub alarm: AlarmConfig,
    pub counts: Counts,
    pub recall: f64,
    pub precision: f64,
    /// Set when no shot was predicted positive, so precision is reported as 0.
    pub precision_undefined: bool,
    pub f2: f64,
    /// `None` when the corpus holds a single class.
    pub auc: Option<f64>,
    pub roc_points: Vec<(f64, f64)>,
    pub outcomes: Vec<ShotOutcome>,
}

impl MetricsReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let c = &self.counts;
        let _ = writeln!(
            s,
            "operating point: t_high = {}, t_low = {}, h = {}, dt_req = {} ms (not a published operating point)",
            self.alarm.t_high, self.alarm.t_low, self.alarm.hysteresis, self.alarm.dt_req_ms
        );
        let _ = writeln!(s, "shots: {} (TP {}, FP {}, TN {}, FN {})", c.total(), c.tp, c.fp, c.tn, c.fn_);
        let _ = writeln!(s, "recall: {:.4}", self.recall);
        let flag = if self.precision_undefined { " (no positive predictions)" } else { "" };
        let _ = writeln!(s, "precision: {:.4}{flag}", self.precision);
        let _ = writeln!(s, "f2: {:.4}", self.f2);
        match self.auc {
            Some(a) => {
                let _ = writeln!(s, "auc: {a:.4} (t_high sweep, t_low = t_high / 2)");
            }
            None => {
                let _ = writeln!(s, "auc: undefined (single-class corpus)");
            }
        }
        s
    }

    pub fn roc_csv(&self) -> String {
        let mut s = String::from("fpr,tpr\n");
        for (f, t) in &self.roc_points {
            let _ = writeln!(s, "{f},{t}");
        }
        s
    }

    pub fn outcomes_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["id", "category", "alarm_time_ms"]).map_err(csv_err)?;
        for o in &self.outcomes {
            let t = o.alarm_time_ms.map(|t| t.to_string()).unwrap_or_default();
            w.write_record([o.id.as_str(), &o.category.to_string(), &t]).map_err(csv_err)?;
        }
        String::from_utf8(w.into_inner().map_err(|e| Error::Config(e.to_string()))?)
            .map_err(|e| Error::Config(e.to_string()))
    }

    /// Writes `metrics.json`, `metrics.txt`, `roc.csv` and `outcomes.csv`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let files = [
            ("metrics.json", serde_json::to_string_pretty(self)?),
            ("metrics.txt", self.to_text()),
            ("roc.csv", self.roc_csv()),
            ("outcomes.csv", self.outcomes_csv()?),
        ];
        for (name, text) in files {
            let p = dir.join(name);
            fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Config(format!("csv: {e}"))
}

/// Scores every shot of `corpus` at the operating point `cfg` and sweeps
/// thresholds for AUC. Every shot must have a score series.
pub fn evaluate(
    scores: &HashMap<String, ScoreSeries>,
    corpus: &[Discharge],
    cfg: &AlarmConfig,
    grid_size: usize,
) -> Result<MetricsReport> {
    cfg.validate()?;
    let missing: Vec<String> = corpus
        .iter()
        .filter(|d| !scores.contains_key(&d.id))
        .map(|d| d.id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingScores(missing));
    }
    let shots: Vec<ScoredShot> = corpus
        .iter()
        .map(|d| ScoredShot {
            id: d.id.clone(),
            scores: scores[&d.id].clone(),
            disruptive: d.disruptive,
            disruption_time_ms: d.disruption_time_ms,
        })
        .collect();
    evaluate_shots(&shots, cfg, grid_size)
}

pub fn evaluate_shots(shots: &[ScoredShot], cfg: &AlarmConfig, grid_size: usize) -> Result<MetricsReport> {
    cfg.validate()?;
    let outcomes = shots
        .par_iter()
        .map(|s| outcome(s, cfg))
        .collect::<Result<Vec<_>>>()?;
    let mut counts = Counts::default();
    for o in &outcomes {
        counts.add(o.category);
    }
    let recall = counts.tpr();
    let precision = counts.precision();
    let (auc, roc_points) = match sweep_auc(shots, cfg, grid_size) {
        Ok((a, p)) => (Some(a), p),
        Err(Error::InsufficientData(msg)) => {
            log::warn!("{msg}");
            (None, Vec::new())
        }
        Err(e) => return Err(e),
    };
    Ok(MetricsReport {
        alarm: *cfg,
        counts,
        recall,
        precision,
        precision_undefined: counts.tp + counts.fp == 0,
        f2: f2(precision, recall),
        auc,
        roc_points,
        outcomes,
    })
}
