//! Trend/seasonal split by a centered moving average over a replicate-padded
//! series: `trend = avg_pool(pad(x))`, `seasonal = x - trend`.

use ndarray::{Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecompConfig {
    /// Odd moving-average length in time steps.
    pub window: usize,
}

impl Default for DecompConfig {
    fn default() -> Self {
        Self { window: 25 }
    }
}

impl DecompConfig {
    pub fn validate(&self) -> Result<()> {
        check_window(self.window)
    }
}

pub(crate) fn check_window(window: usize) -> Result<()> {
    if window == 0 || window % 2 == 0 {
        return Err(Error::Config(format!(
            "moving-average window must be odd and positive, got {window}"
        )));
    }
    Ok(())
}

/// Centered moving average along the time axis (rows), each end padded by
/// repeating the first/last row `(window - 1) / 2` times.
pub fn moving_average(x: ArrayView2<'_, f64>, window: usize) -> Result<Array2<f64>> {
    check_window(window)?;
    let (rows, cols) = x.dim();
    let mut out = Array2::zeros((rows, cols));
    if rows == 0 {
        return Ok(out);
    }
    let half = (window / 2) as isize;
    let last = rows as isize - 1;
    let scale = 1.0 / window as f64;
    for t in 0..rows as isize {
        let mut acc = out.row_mut(t as usize);
        for k in -half..=half {
            let src = (t + k).clamp(0, last) as usize;
            acc.scaled_add(scale, &x.row(src));
        }
    }
    Ok(out)
}

/// Adjoint of [`moving_average`]: maps an output gradient back onto the input.
pub(crate) fn moving_average_adjoint(grad: ArrayView2<'_, f64>, window: usize) -> Array2<f64> {
    let (rows, cols) = grad.dim();
    let mut out = Array2::zeros((rows, cols));
    if rows == 0 {
        return out;
    }
    let half = (window / 2) as isize;
    let last = rows as isize - 1;
    let scale = 1.0 / window as f64;
    for t in 0..rows as isize {
        for k in -half..=half {
            let dst = (t + k).clamp(0, last) as usize;
            out.row_mut(dst).scaled_add(scale, &grad.row(t as usize));
        }
    }
    out
}

/// Splits `x` (T×d) into `(trend, seasonal)` with `x == trend + seasonal`.
pub fn decompose(x: ArrayView2<'_, f64>, cfg: &DecompConfig) -> Result<(Array2<f64>, Array2<f64>)> {
    if x.nrows() == 0 {
        return Err(Error::InsufficientData("cannot decompose an empty series".into()));
    }
    let trend = moving_average(x, cfg.window)?;
    let seasonal = &x - &trend;
    Ok((trend, seasonal))
}

pub fn recompose(trend: ArrayView2<'_, f64>, seasonal: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    if trend.dim() != seasonal.dim() {
        return Err(Error::shape(
            "recompose",
            format!("trend {:?} vs seasonal {:?}", trend.dim(), seasonal.dim()),
        ));
    }
    let mut out = trend.to_owned();
    Zip::from(&mut out).and(&seasonal).for_each(|a, &b| *a += b);
    Ok(out)
}
