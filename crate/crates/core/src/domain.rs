//! Shared data model: machines, feature schema, discharges and benchmark splits.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Number of channels every preprocessed discharge carries.
pub const N_CHANNELS: usize = 12;
/// Physics channels come first, indicator channels last.
pub const N_PHYSICS: usize = 9;

/// Column indices into a discharge's sample matrix.
pub mod channel {
    pub const BETA_P: usize = 0;
    pub const LI: usize = 1;
    pub const Q95: usize = 2;
    pub const N1_MODE: usize = 3;
    pub const GREENWALD_FRACTION: usize = 4;
    pub const LOWER_GAP: usize = 5;
    pub const KAPPA: usize = 6;
    pub const IP_ERROR_FRAC: usize = 7;
    pub const V_LOOP: usize = 8;
    pub const IND_CMOD: usize = 9;
    pub const IND_DIIID: usize = 10;
    pub const IND_EAST: usize = 11;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Machine {
    CMod,
    DIIID,
    EAST,
}

impl Machine {
    pub const ALL: [Machine; 3] = [Machine::CMod, Machine::DIIID, Machine::EAST];

    /// Column of this machine's one-hot indicator channel.
    pub fn indicator_channel(self) -> usize {
        match self {
            Machine::CMod => channel::IND_CMOD,
            Machine::DIIID => channel::IND_DIIID,
            Machine::EAST => channel::IND_EAST,
        }
    }

    pub fn stats(self) -> MachineStats {
        MachineStats::default_for(self)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Machine::CMod => "CMod",
            Machine::DIIID => "DIIID",
            Machine::EAST => "EAST",
        }
    }
}

impl fmt::Display for Machine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Machine {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace(['-', '_', ' '], "").as_str() {
            "cmod" | "alcatorcmod" => Ok(Machine::CMod),
            "diiid" | "d3d" | "diii" => Ok(Machine::DIIID),
            "east" => Ok(Machine::EAST),
            other => Err(Error::Config(format!("unknown machine `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelKind {
    Physics,
    MachineIndicator,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelDef {
    pub name: String,
    pub unit: String,
    pub kind: ChannelKind,
}

/// Ordered channel definitions: nine global plasma-state features followed
/// by one binary indicator per machine.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSchema {
    channels: Vec<ChannelDef>,
}

impl FeatureSchema {
    pub fn new(channels: Vec<ChannelDef>) -> Result<Self> {
        if channels.len() != N_CHANNELS {
            return Err(Error::Schema(format!(
                "expected {N_CHANNELS} channels, found {}",
                channels.len()
            )));
        }
        let mut seen = HashSet::new();
        for c in &channels {
            if !seen.insert(c.name.as_str()) {
                return Err(Error::Schema(format!("duplicate channel name `{}`", c.name)));
            }
        }
        let indicators = channels
            .iter()
            .filter(|c| c.kind == ChannelKind::MachineIndicator)
            .count();
        if indicators != 3 {
            return Err(Error::Schema(format!(
                "expected 3 machine-indicator channels, found {indicators}"
            )));
        }
        Ok(Self { channels })
    }

    pub fn standard() -> Self {
        let phys = |name: &str, unit: &str| ChannelDef {
            name: name.into(),
            unit: unit.into(),
            kind: ChannelKind::Physics,
        };
        let ind = |name: &str| ChannelDef {
            name: name.into(),
            unit: "".into(),
            kind: ChannelKind::MachineIndicator,
        };
        Self::new(vec![
            phys("beta_p", ""),
            phys("li", ""),
            phys("q95", ""),
            phys("n1_mode", "T"),
            phys("greenwald_fraction", ""),
            phys("lower_gap", "m"),
            phys("kappa", ""),
            phys("ip_error_frac", ""),
            phys("v_loop", "V"),
            ind("is_cmod"),
            ind("is_diiid"),
            ind("is_east"),
        ])
        .expect("standard schema is valid")
    }

    pub fn channels(&self) -> &[ChannelDef] {
        &self.channels
    }

    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    pub fn is_indicator(&self, ch: usize) -> bool {
        self.channels[ch].kind == ChannelKind::MachineIndicator
    }

    pub fn physics_channels(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(|&c| !self.is_indicator(c))
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.channels.iter().position(|c| c.name == name)
    }
}

impl Default for FeatureSchema {
    fn default() -> Self {
        Self::standard()
    }
}

/// Per-machine dataset characteristics. `tau_ms` is used as the horizon
/// for labelling a window as pre-disruptive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MachineStats {
    pub machine: Machine,
    pub tau_ms: f64,
    pub discharge_count: usize,
    pub avg_length_ms: f64,
    pub native_sampling_ms: f64,
}

impl MachineStats {
    pub fn default_for(machine: Machine) -> Self {
        let (tau_ms, discharge_count, avg_length_ms, native_sampling_ms) = match machine {
            Machine::CMod => (50.0, 4000, 520.0, 0.005),
            Machine::DIIID => (150.0, 8000, 3700.0, 0.01),
            Machine::EAST => (400.0, 11000, 5300.0, 0.025),
        };
        Self {
            machine,
            tau_ms,
            discharge_count,
            avg_length_ms,
            native_sampling_ms,
        }
    }
}

/// One shot on a uniform time grid. Row `t` is the sample at `t * grid_step_ms`.
#[derive(Debug, Clone, PartialEq)]
pub struct Discharge {
    pub id: String,
    pub machine: Machine,
    pub samples: Array2<f64>,
    pub grid_step_ms: f64,
    pub disruptive: bool,
    /// Milliseconds from series start; present iff `disruptive`.
    pub disruption_time_ms: Option<f64>,
}

impl Discharge {
    pub fn len(&self) -> usize {
        self.samples.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.nrows() == 0
    }

    pub fn duration_ms(&self) -> f64 {
        self.len() as f64 * self.grid_step_ms
    }

    pub fn time_of(&self, step: usize) -> f64 {
        step as f64 * self.grid_step_ms
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    Empty,
    ChannelCount { expected: usize, found: usize },
    NonFinite { t: usize, ch: usize },
    GridStep(f64),
    DisruptionTimeMissing,
    DisruptionTimeUnexpected,
    DisruptionTime { time_ms: f64, limit_ms: f64 },
    IndicatorNotBinary { t: usize, ch: usize },
    IndicatorNotOneHot { t: usize },
    IndicatorMachine { expected: usize },
    IndicatorNotConstant { t: usize, ch: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Empty => write!(f, "length: series has no samples"),
            Violation::ChannelCount { expected, found } => {
                write!(f, "channels: expected {expected}, found {found}")
            }
            Violation::NonFinite { t, ch } => write!(f, "finite-values @ ({t},{ch})"),
            Violation::GridStep(s) => write!(f, "grid-step: {s} ms is not positive"),
            Violation::DisruptionTimeMissing => {
                write!(f, "disruption-time: disruptive shot without a disruption time")
            }
            Violation::DisruptionTimeUnexpected => {
                write!(f, "disruption-time: non-disruptive shot carries a disruption time")
            }
            Violation::DisruptionTime { time_ms, limit_ms } => write!(
                f,
                "disruption-time: {time_ms} ms outside [0, {limit_ms}] ms"
            ),
            Violation::IndicatorNotBinary { t, ch } => {
                write!(f, "indicator-binary @ ({t},{ch})")
            }
            Violation::IndicatorNotOneHot { t } => write!(f, "indicator-one-hot @ t={t}"),
            Violation::IndicatorMachine { expected } => {
                write!(f, "indicator-machine: channel {expected} should be hot")
            }
            Violation::IndicatorNotConstant { t, ch } => {
                write!(f, "indicator-constant @ ({t},{ch})")
            }
        }
    }
}

/// Checks every discharge invariant and reports each failure with its location.
pub fn validate_discharge(d: &Discharge) -> Vec<Violation> {
    let mut out = Vec::new();
    let (rows, cols) = d.samples.dim();
    if rows == 0 {
        out.push(Violation::Empty);
    }
    if cols != N_CHANNELS {
        out.push(Violation::ChannelCount {
            expected: N_CHANNELS,
            found: cols,
        });
    }
    if !(d.grid_step_ms > 0.0 && d.grid_step_ms.is_finite()) {
        out.push(Violation::GridStep(d.grid_step_ms));
    }
    for ((t, ch), v) in d.samples.indexed_iter() {
        if !v.is_finite() {
            out.push(Violation::NonFinite { t, ch });
        }
    }
    match (d.disruptive, d.disruption_time_ms) {
        (true, None) => out.push(Violation::DisruptionTimeMissing),
        (false, Some(_)) => out.push(Violation::DisruptionTimeUnexpected),
        (true, Some(time_ms)) => {
            let limit_ms = rows as f64 * d.grid_step_ms;
            if !(0.0..=limit_ms).contains(&time_ms) {
                out.push(Violation::DisruptionTime { time_ms, limit_ms });
            }
        }
        (false, None) => {}
    }
    if cols == N_CHANNELS && rows > 0 {
        let schema = FeatureSchema::standard();
        let indicators: Vec<usize> = (0..cols).filter(|&c| schema.is_indicator(c)).collect();
        for t in 0..rows {
            let mut hot = 0;
            for &ch in &indicators {
                let v = d.samples[[t, ch]];
                if v != 0.0 && v != 1.0 {
                    out.push(Violation::IndicatorNotBinary { t, ch });
                } else if v == 1.0 {
                    hot += 1;
                }
                if t > 0 && v.to_bits() != d.samples[[0, ch]].to_bits() {
                    out.push(Violation::IndicatorNotConstant { t, ch });
                }
            }
            if hot != 1 {
                out.push(Violation::IndicatorNotOneHot { t });
            }
        }
        let expected = d.machine.indicator_channel();
        if d.samples[[0, expected]] != 1.0 {
            out.push(Violation::IndicatorMachine { expected });
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitCase {
    ZeroShot,
    FewShot,
    ManyShot,
    SingleMachine,
}

impl FromStr for SplitCase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "zeroshot" | "1" | "case1" => Ok(SplitCase::ZeroShot),
            "fewshot" | "2" | "case2" => Ok(SplitCase::FewShot),
            "manyshot" | "allmachines" | "3" | "case3" => Ok(SplitCase::ManyShot),
            "singlemachine" | "4" | "case4" => Ok(SplitCase::SingleMachine),
            other => Err(Error::Config(format!("unknown split case `{other}`"))),
        }
    }
}

impl fmt::Display for SplitCase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitCase::ZeroShot => "zero_shot",
            SplitCase::FewShot => "few_shot",
            SplitCase::ManyShot => "many_shot",
            SplitCase::SingleMachine => "single_machine",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub case: SplitCase,
    pub new_machine: Machine,
    pub few_shot_count: usize,
    /// Share of new-machine shots held out for testing in the many-shot and
    /// single-machine cases. The zero- and few-shot cases test on every
    /// new-machine shot that is not used for training.
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(case: SplitCase, new_machine: Machine, seed: u64) -> Self {
        Self {
            case,
            new_machine,
            few_shot_count: 20,
            holdout_fraction: 0.5,
            seed,
        }
    }

    pub fn with_few_shot_count(mut self, n: usize) -> Self {
        self.few_shot_count = n;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<Discharge>,
    pub test: Vec<Discharge>,
}

/// Index form of [`make_splits`]: positions into `dataset`, each list ordered by id.
pub fn make_split_indices(dataset: &[Discharge], spec: &SplitSpec) -> Result<(Vec<usize>, Vec<usize>)> {
    if dataset.is_empty() {
        return Err(Error::InsufficientData("cannot split an empty dataset".into()));
    }
    if !(0.0..1.0).contains(&spec.holdout_fraction) || spec.holdout_fraction <= 0.0 {
        return Err(Error::Config(format!(
            "holdout_fraction must lie in (0, 1), got {}",
            spec.holdout_fraction
        )));
    }
    let mut seen = HashSet::new();
    for d in dataset {
        if !seen.insert(d.id.as_str()) {
            return Err(Error::Config(format!("duplicate discharge id `{}`", d.id)));
        }
    }

    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.sort_by(|&a, &b| dataset[a].id.cmp(&dataset[b].id));
    let (mut new_pool, others): (Vec<usize>, Vec<usize>) = order
        .into_iter()
        .partition(|&i| dataset[i].machine == spec.new_machine);
    if new_pool.is_empty() {
        return Err(Error::InsufficientData(format!(
            "no {} discharges to test on",
            spec.new_machine
        )));
    }
    let mut rng = Rng::new(spec.seed).substream("splits");
    rng.shuffle(&mut new_pool);

    let (mut train, mut test) = match spec.case {
        SplitCase::ZeroShot => (others, new_pool),
        SplitCase::FewShot => {
            let available = new_pool.len() - 1;
            if spec.few_shot_count > available {
                return Err(Error::InsufficientData(format!(
                    "few_shot_count {} exceeds the {available} {} shots available for training",
                    spec.few_shot_count, spec.new_machine
                )));
            }
            let test = new_pool.split_off(spec.few_shot_count);
            let mut train = others;
            train.extend(new_pool);
            (train, test)
        }
        SplitCase::ManyShot | SplitCase::SingleMachine => {
            let n_test = ((new_pool.len() as f64 * spec.holdout_fraction).round() as usize)
                .clamp(1, new_pool.len());
            let test = new_pool.split_off(new_pool.len() - n_test);
            let train = if spec.case == SplitCase::ManyShot {
                let mut t = others;
                t.extend(new_pool);
                t
            } else {
                new_pool
            };
            (train, test)
        }
    };
    train.sort_by(|&a, &b| dataset[a].id.cmp(&dataset[b].id));
    test.sort_by(|&a, &b| dataset[a].id.cmp(&dataset[b].id));
    Ok((train, test))
}

/// Builds the train/test partition for one benchmark case.
pub fn make_splits(dataset: &[Discharge], spec: &SplitSpec) -> Result<Split> {
    let (train, test) = make_split_indices(dataset, spec)?;
    Ok(Split {
        train: train.into_iter().map(|i| dataset[i].clone()).collect(),
        test: test.into_iter().map(|i| dataset[i].clone()).collect(),
    })
}
