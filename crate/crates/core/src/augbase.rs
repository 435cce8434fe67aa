//! Handcrafted baseline augmentations: jitter, per-channel scaling, smooth
//! time warping and random cropping. Indicator channels are never perturbed;
//! they only move with the time axis.

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::domain::{Discharge, FeatureSchema};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum AugOp {
    /// Adds i.i.d. `N(0, σ²)` noise to every physics sample.
    Jitter { sigma: f64 },
    /// Multiplies each physics channel by one draw from `N(1, σ²)`.
    Scale { sigma: f64 },
    /// Resamples along a random monotone time map whose local speed stays
    /// within `[1/max_speed_ratio, max_speed_ratio]`.
    TimeWarp { knots: usize, max_speed_ratio: f64 },
    /// Keeps a random contiguous window of `length` steps.
    Crop { length: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugStep {
    #[serde(flatten)]
    pub op: AugOp,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugSpec {
    pub ops: Vec<AugStep>,
    pub seed: u64,
}

impl Default for AugSpec {
    /// Jitter σ = 0.1, scale σ = 0.1, time warp with 4 knots and speed
    /// ratio 2, each always applied; no crop.
    fn default() -> Self {
        Self {
            ops: vec![
                AugStep {
                    op: AugOp::Jitter { sigma: 0.1 },
                    probability: 1.0,
                },
                AugStep {
                    op: AugOp::Scale { sigma: 0.1 },
                    probability: 1.0,
                },
                AugStep {
                    op: AugOp::TimeWarp {
                        knots: 4,
                        max_speed_ratio: 2.0,
                    },
                    probability: 1.0,
                },
            ],
            seed: 0,
        }
    }
}

impl AugSpec {
    pub fn identity() -> Self {
        Self {
            ops: Vec::new(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for step in &self.ops {
            if !(0.0..=1.0).contains(&step.probability) {
                return Err(Error::Config(format!(
                    "augmentation probability must be in [0, 1], got {}",
                    step.probability
                )));
            }
            match step.op {
                AugOp::Jitter { sigma } | AugOp::Scale { sigma } if !(sigma >= 0.0 && sigma.is_finite()) => {
                    return Err(Error::Config(format!("sigma must be non-negative, got {sigma}")));
                }
                AugOp::TimeWarp { knots, max_speed_ratio } if knots == 0 || !(max_speed_ratio >= 1.0) => {
                    return Err(Error::Config(format!(
                        "time warp needs knots ≥ 1 and max_speed_ratio ≥ 1, got {knots} / {max_speed_ratio}"
                    )));
                }
                AugOp::Crop { length: 0 } => return Err(Error::Config("crop length must be positive".into())),
                _ => {}
            }
        }
        Ok(())
    }

    /// The same pipeline with crop steps removed, for fixed-length windows.
    pub fn without_crop(&self) -> Self {
        Self {
            ops: self
                .ops
                .iter()
                .filter(|s| !matches!(s.op, AugOp::Crop { .. }))
                .copied()
                .collect(),
            seed: self.seed,
        }
    }
}

/// Where a crop window is placed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum CropAnchor {
    Random,
    End,
}

/// Applies each op with its probability, in order.
pub fn apply(spec: &AugSpec, x: ArrayView2<'_, f64>, rng: &mut Rng) -> Result<Array2<f64>> {
    apply_anchored(spec, x, rng, CropAnchor::Random).map(|(out, _)| out)
}

/// Returns the output and the first source row kept by any crop.
fn apply_anchored(spec: &AugSpec, x: ArrayView2<'_, f64>, rng: &mut Rng, anchor: CropAnchor) -> Result<(Array2<f64>, usize)> {
    spec.validate()?;
    let schema = FeatureSchema::standard();
    let physics: Vec<usize> = schema.physics_channels().collect();
    let mut out = x.to_owned();
    let mut offset = 0;
    for step in &spec.ops {
        // The draw happens even at probability 0 or 1 so that the stream
        // position does not depend on the probabilities.
        let fire = rng.uniform() < step.probability;
        if !fire {
            continue;
        }
        match step.op {
            AugOp::Jitter { sigma } => {
                for t in 0..out.nrows() {
                    for &c in &physics {
                        out[[t, c]] += sigma * rng.normal();
                    }
                }
            }
            AugOp::Scale { sigma } => {
                for &c in &physics {
                    let factor = 1.0 + sigma * rng.normal();
                    out.column_mut(c).mapv_inplace(|v| v * factor);
                }
            }
            AugOp::TimeWarp { knots, max_speed_ratio } => {
                let map = warp_map(out.nrows(), knots, max_speed_ratio, rng);
                out = resample_at(out.view(), &map);
            }
            AugOp::Crop { length } => {
                let rows = out.nrows();
                if length > rows {
                    return Err(Error::Config(format!("crop length {length} exceeds series length {rows}")));
                }
                let start = match anchor {
                    CropAnchor::Random => rng.below(rows - length + 1),
                    CropAnchor::End => rows - length,
                };
                out = out.slice(ndarray::s![start..start + length, ..]).to_owned();
                offset += start;
            }
        }
    }
    Ok((out, offset))
}

/// A strictly increasing map from output index to (fractional) source index
/// with `map[0] = 0` and `map[T-1] = T-1`.
///
/// Speeds are drawn uniformly in `[1, r]` at `knots + 2` evenly spaced
/// anchors and interpolated linearly; the map integrates the speed and is
/// rescaled to hit both endpoints, so local speeds land in `[1/r, r]`.
pub fn warp_map(rows: usize, knots: usize, max_speed_ratio: f64, rng: &mut Rng) -> Vec<f64> {
    let anchors = knots + 2;
    let speeds: Vec<f64> = (0..anchors).map(|_| rng.uniform_range(1.0, max_speed_ratio.max(1.0))).collect();
    if rows <= 1 {
        return vec![0.0; rows];
    }
    let last = (rows - 1) as f64;
    let speed_at = |pos: f64| {
        let u = pos / last * (anchors - 1) as f64;
        let i = (u.floor() as usize).min(anchors - 2);
        let f = u - i as f64;
        speeds[i] * (1.0 - f) + speeds[i + 1] * f
    };
    let mut map = Vec::with_capacity(rows);
    map.push(0.0);
    let mut acc = 0.0;
    for i in 1..rows {
        // trapezoid over one output step
        acc += 0.5 * (speed_at((i - 1) as f64) + speed_at(i as f64));
        map.push(acc);
    }
    let scale = last / acc;
    for v in map.iter_mut() {
        *v *= scale;
    }
    map[rows - 1] = last;
    map
}

fn resample_at(x: ArrayView2<'_, f64>, positions: &[f64]) -> Array2<f64> {
    let rows = x.nrows();
    let mut out = Array2::zeros((positions.len(), x.ncols()));
    for (i, &p) in positions.iter().enumerate() {
        let lo = (p.floor().max(0.0) as usize).min(rows - 1);
        let hi = (lo + 1).min(rows - 1);
        let f = p - lo as f64;
        for c in 0..x.ncols() {
            let (a, b) = (x[[lo, c]], x[[hi, c]]);
            out[[i, c]] = if f == 0.0 || a == b { a } else { a + f * (b - a) };
        }
    }
    out
}

/// Augments a whole discharge. A crop on a disruptive shot is anchored at
/// the end of the series so the pre-disruption region and its label survive.
pub fn apply_to_discharge(spec: &AugSpec, d: &Discharge, rng: &mut Rng) -> Result<Discharge> {
    let anchor = if d.disruptive { CropAnchor::End } else { CropAnchor::Random };
    let (samples, offset) = apply_anchored(spec, d.samples.view(), rng, anchor)?;
    let end = samples.len_of(Axis(0)) as f64 * d.grid_step_ms;
    let shift = offset as f64 * d.grid_step_ms;
    Ok(Discharge {
        samples,
        disruption_time_ms: d.disruption_time_ms.map(|t| (t - shift).clamp(0.0, end)),
        ..d.clone()
    })
}
