//! Synthetic discharges for desk-scale runs. Physics channels are sums of a
//! few slow sinusoids around machine-dependent operating points; disruptive
//! shots add a saturating rise in the n=1 mode amplitude and in the plasma
//! current error, starting τ(machine) before the disruption.

use std::f64::consts::PI;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{channel, Discharge, Machine, N_CHANNELS, N_PHYSICS};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub grid_step_ms: f64,
    pub min_length_ms: f64,
    pub max_length_ms: f64,
    /// Standard deviation of white measurement noise, relative to each
    /// channel's natural variation.
    pub noise: f64,
    /// Size of the disruption precursor, relative to the defaults.
    pub precursor_scale: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            grid_step_ms: 5.0,
            min_length_ms: 300.0,
            max_length_ms: 700.0,
            noise: 0.1,
            precursor_scale: 1.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.grid_step_ms > 0.0) {
            return Err(Error::Config(format!("grid step must be positive, got {}", self.grid_step_ms)));
        }
        if !(self.min_length_ms >= self.grid_step_ms && self.max_length_ms >= self.min_length_ms) {
            return Err(Error::Config(format!(
                "need grid_step <= min_length <= max_length, got {} / {} / {}",
                self.grid_step_ms, self.min_length_ms, self.max_length_ms
            )));
        }
        if !(self.noise >= 0.0 && self.precursor_scale >= 0.0) {
            return Err(Error::Config("noise and precursor scale must be non-negative".into()));
        }
        Ok(())
    }
}

/// (operating point, natural variation) per physics channel.
const CHANNELS: [(f64, f64); N_PHYSICS] = [
    (0.6, 0.15),  // beta_p
    (1.1, 0.10),  // li
    (4.0, 0.50),  // q95
    (0.2, 0.05),  // n1_mode
    (0.5, 0.10),  // greenwald_fraction
    (0.05, 0.01), // lower_gap
    (1.6, 0.05),  // kappa
    (0.0, 0.02),  // ip_error_frac
    (1.0, 0.30),  // v_loop
];

fn machine_offset(machine: Machine, c: usize) -> f64 {
    // Distinct but overlapping operating regimes.
    let k = match machine {
        Machine::CMod => 0.0,
        Machine::DIIID => 1.0,
        Machine::EAST => -1.0,
    };
    let sign = if c % 2 == 0 { 1.0 } else { -1.0 };
    1.0 + 0.15 * k * sign
}

/// [`generate_synthetic_with`] using [`SynthConfig::default`].
pub fn generate_synthetic(
    n_shots: usize,
    machine: Machine,
    disruptive_fraction: f64,
    rng: &Rng,
) -> Result<Vec<Discharge>> {
    generate_synthetic_with(&SynthConfig::default(), n_shots, machine, disruptive_fraction, rng)
}

/// Exactly `round(n_shots · disruptive_fraction)` shots are disruptive.
/// Shots are generated on independent forks of `rng`, so the output does not
/// depend on thread scheduling.
pub fn generate_synthetic_with(
    cfg: &SynthConfig,
    n_shots: usize,
    machine: Machine,
    disruptive_fraction: f64,
    rng: &Rng,
) -> Result<Vec<Discharge>> {
    cfg.validate()?;
    if !(0.0..=1.0).contains(&disruptive_fraction) {
        return Err(Error::Config(format!(
            "disruptive fraction must be in [0, 1], got {disruptive_fraction}"
        )));
    }
    let base = rng.substream("synthetic").substream(machine.as_str());
    let n_disruptive = (n_shots as f64 * disruptive_fraction).round() as usize;
    let mut order: Vec<usize> = (0..n_shots).collect();
    base.substream("labels").shuffle(&mut order);
    let mut disruptive = vec![false; n_shots];
    for &i in &order[..n_disruptive] {
        disruptive[i] = true;
    }
    Ok((0..n_shots)
        .into_par_iter()
        .map(|i| one_shot(cfg, machine, i, disruptive[i], &mut base.fork(i as u64)))
        .collect())
}

fn one_shot(cfg: &SynthConfig, machine: Machine, index: usize, disruptive: bool, rng: &mut Rng) -> Discharge {
    let step = cfg.grid_step_ms;
    let length_ms = rng.uniform_range(cfg.min_length_ms, cfg.max_length_ms);
    let rows = ((length_ms / step).floor() as usize).max(1);
    let end = rows as f64 * step;
    let tau = machine.stats().tau_ms;
    let mut samples = Array2::zeros((rows, N_CHANNELS));
    for (c, &(level, spread)) in CHANNELS.iter().enumerate() {
        let centre = level * machine_offset(machine, c) + spread * 0.5 * rng.normal();
        let waves: Vec<(f64, f64, f64)> = (0..3)
            .map(|_| {
                let amp = spread * rng.uniform_range(0.2, 0.6);
                let period = rng.uniform_range(60.0, 400.0);
                let phase = rng.uniform_range(0.0, 2.0 * PI);
                (amp, period, phase)
            })
            .collect();
        for t in 0..rows {
            let time = t as f64 * step;
            let smooth: f64 = waves
                .iter()
                .map(|&(a, p, ph)| a * (2.0 * PI * time / p + ph).sin())
                .sum();
            samples[[t, c]] = centre + smooth + cfg.noise * spread * rng.normal();
        }
    }
    if disruptive {
        let onset = end - tau;
        let growth = rng.uniform_range(0.8, 1.2) * cfg.precursor_scale;
        for t in 0..rows {
            let time = t as f64 * step;
            if time < onset {
                continue;
            }
            let s = ((time - onset) / tau).min(1.0);
            let g = (1.0 - (-5.0 * s).exp()) / (1.0 - (-5.0f64).exp());
            samples[[t, channel::N1_MODE]] += 0.6 * growth * g;
            samples[[t, channel::IP_ERROR_FRAC]] += 0.15 * growth * g;
        }
    }
    samples.column_mut(machine.indicator_channel()).fill(1.0);
    Discharge {
        id: format!("{}-{index:05}", machine.as_str().to_ascii_lowercase()),
        machine,
        samples,
        grid_step_ms: step,
        disruptive,
        disruption_time_ms: disruptive.then_some(end),
    }
}
