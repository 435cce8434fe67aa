//! Similarity analysis between original discharges and their augmentations:
//! multivariate dynamic time warping and the Wilcoxon signed-rank test on
//! paired distances.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::ArrayView2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::augbase::{self, AugSpec};
use crate::domain::Discharge;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::viewmaker::{self, ViewmakerModel};

/// Largest sample size for which the signed-rank p-value is computed exactly.
pub const EXACT_MAX_N: usize = 20;
/// Fewest nonzero differences for which a comparison report carries a p-value.
pub const MIN_REPORTED_N: usize = 5;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DtwConfig {
    /// Sakoe-Chiba half-width: cells with `|i - j| > band` are excluded.
    pub band: Option<usize>,
}

/// DTW cost with steps (1,0), (0,1), (1,1) and Euclidean distance between
/// time steps as the local cost.
pub fn dtw(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, cfg: &DtwConfig) -> Result<f64> {
    let (ta, tb) = (a.nrows(), b.nrows());
    if ta == 0 || tb == 0 {
        return Err(Error::shape("dtw", "series must have at least one step"));
    }
    if a.ncols() != b.ncols() {
        return Err(Error::shape("dtw", format!("{} vs {} channels", a.ncols(), b.ncols())));
    }
    if let Some(w) = cfg.band {
        if ta.abs_diff(tb) > w {
            return Err(Error::Config(format!(
                "band {w} admits no alignment between lengths {ta} and {tb}"
            )));
        }
    }
    let in_band = |i: usize, j: usize| cfg.band.is_none_or(|w| i.abs_diff(j) <= w);
    let mut prev = vec![f64::INFINITY; tb + 1];
    let mut cur = vec![f64::INFINITY; tb + 1];
    prev[0] = 0.0;
    for i in 1..=ta {
        cur[0] = f64::INFINITY;
        let ra = a.row(i - 1);
        for j in 1..=tb {
            if !in_band(i - 1, j - 1) {
                cur[j] = f64::INFINITY;
                continue;
            }
            let cost = ra.iter().zip(b.row(j - 1)).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            cur[j] = cost + prev[j - 1].min(prev[j]).min(cur[j - 1]);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    let d = prev[tb];
    if !d.is_finite() {
        return Err(Error::NonFinite { op: "dtw".into() });
    }
    Ok(d)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZeroMethod {
    /// Drop zero differences before ranking.
    #[default]
    Wilcox,
    /// Rank zero differences with the rest, then drop them.
    Pratt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PMethod {
    Exact,
    Normal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Wilcoxon {
    /// Nonzero differences.
    pub n: usize,
    pub w_plus: f64,
    pub w_minus: f64,
    /// `min(W+, W-)`.
    pub statistic: f64,
    /// Two-sided.
    pub p_value: f64,
    pub method: PMethod,
}

/// Signed-rank test on `x - y` with midranks for ties; two-sided p is exact
/// up to `EXACT_MAX_N` nonzero differences and uses the tie-corrected normal
/// approximation with continuity correction above.
pub fn wilcoxon_signed_rank(pairs: &[(f64, f64)]) -> Result<Wilcoxon> {
    wilcoxon_signed_rank_with(pairs, ZeroMethod::Wilcox)
}

pub fn wilcoxon_signed_rank_with(pairs: &[(f64, f64)], zeros: ZeroMethod) -> Result<Wilcoxon> {
    let mut diffs: Vec<f64> = pairs.iter().map(|(x, y)| x - y).collect();
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(Error::NonFinite { op: "wilcoxon".into() });
    }
    if zeros == ZeroMethod::Wilcox {
        diffs.retain(|&d| d != 0.0);
    }
    // Doubled midranks are integers, which keeps the exact distribution on
    // an integer lattice.
    let ranks2 = doubled_midranks(&diffs);
    let signed: Vec<(u64, bool)> = diffs
        .iter()
        .zip(&ranks2)
        .filter(|(d, _)| **d != 0.0)
        .map(|(d, &r)| (r, *d > 0.0))
        .collect();
    let n = signed.len();
    if n == 0 {
        return Err(Error::InsufficientData("all paired differences are zero".into()));
    }
    let plus2: u64 = signed.iter().filter(|s| s.1).map(|s| s.0).sum();
    let total2: u64 = signed.iter().map(|s| s.0).sum();
    let minus2 = total2 - plus2;
    let (p_value, method) = if n <= EXACT_MAX_N {
        let ranks: Vec<u64> = signed.iter().map(|s| s.0).collect();
        (exact_p(&ranks, plus2), PMethod::Exact)
    } else {
        let mean = total2 as f64 / 4.0;
        let var = signed.iter().map(|s| (s.0 as f64).powi(2)).sum::<f64>() / 16.0;
        let dev = ((plus2 as f64 / 2.0 - mean).abs() - 0.5).max(0.0);
        let z = dev / var.sqrt();
        let normal = Normal::standard();
        ((2.0 * normal.sf(z)).min(1.0), PMethod::Normal)
    };
    let (w_plus, w_minus) = (plus2 as f64 / 2.0, minus2 as f64 / 2.0);
    Ok(Wilcoxon {
        n,
        w_plus,
        w_minus,
        statistic: w_plus.min(w_minus),
        p_value,
        method,
    })
}

/// Twice the average rank of each `|d|` among all `|d|`.
fn doubled_midranks(diffs: &[f64]) -> Vec<u64> {
    let mut order: Vec<usize> = (0..diffs.len()).collect();
    order.sort_by(|&i, &j| diffs[i].abs().total_cmp(&diffs[j].abs()));
    let mut ranks = vec![0; diffs.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && diffs[order[end]].abs() == diffs[order[start]].abs() {
            end += 1;
        }
        // Ranks start+1..=end averaged, doubled.
        let r2 = (start + 1 + end) as u64;
        for &k in &order[start..end] {
            ranks[k] = r2;
        }
        start = end;
    }
    ranks
}

/// Two-sided p of the observed doubled positive-rank sum under the null
/// where each sign is an independent fair coin.
fn exact_p(ranks2: &[u64], observed2: u64) -> f64 {
    let total: u64 = ranks2.iter().sum();
    let mut counts = vec![0.0f64; total as usize + 1];
    counts[0] = 1.0;
    let mut reach = 0usize;
    for &r in ranks2 {
        let r = r as usize;
        for s in (0..=reach).rev() {
            if counts[s] != 0.0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    let all = 2f64.powi(ranks2.len() as i32);
    let lower: f64 = counts[..=observed2 as usize].iter().sum();
    let upper: f64 = counts[observed2 as usize..].iter().sum();
    (2.0 * lower.min(upper) / all).min(1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DtwPair {
    pub shot_id: String,
    pub view: f64,
    pub tsaug: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub n_pairs: usize,
    pub mean_view: f64,
    pub mean_tsaug: f64,
    pub pairs: Vec<DtwPair>,
    pub wilcoxon: Option<Wilcoxon>,
    /// Why `wilcoxon` is absent, when it is.
    pub note: Option<String>,
}

impl ComparisonReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "pairs            {}", self.n_pairs);
        let _ = writeln!(s, "mean DTW view    {:.4}", self.mean_view);
        let _ = writeln!(s, "mean DTW tsaug   {:.4}", self.mean_tsaug);
        match (&self.wilcoxon, &self.note) {
            (Some(w), _) => {
                let _ = writeln!(s, "wilcoxon W       {:.1} (n = {}, {:?})", w.statistic, w.n, w.method);
                let _ = writeln!(s, "wilcoxon p       {:.6e}", w.p_value);
            }
            (None, Some(note)) => {
                let _ = writeln!(s, "wilcoxon         not computed: {note}");
            }
            (None, None) => {}
        }
        s
    }

    pub fn pairs_csv(&self) -> String {
        let mut s = String::from("shot,dtw_view,dtw_tsaug\n");
        for p in &self.pairs {
            let _ = writeln!(s, "{},{:e},{:e}", p.shot_id, p.view, p.tsaug);
        }
        s
    }

    /// Writes `dtw_report.json`, `dtw_report.txt` and `dtw_pairs.csv`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: &str, body: String| {
            let path = dir.join(name);
            std::fs::write(&path, body).map_err(|e| Error::io(&path, e))
        };
        write("dtw_report.json", serde_json::to_string_pretty(self)?)?;
        write("dtw_report.txt", self.to_text())?;
        write("dtw_pairs.csv", self.pairs_csv())
    }
}

/// DTW from each of up to `n_samples` randomly chosen disruptive shots to
/// its viewmaker view and to its handcrafted augmentation, with a signed-rank
/// test on the paired distances.
pub fn compare_augmentations(
    sample: &[Discharge],
    vm: &ViewmakerModel,
    tsaug: &AugSpec,
    n_samples: usize,
    dtw_cfg: &DtwConfig,
    rng: &Rng,
) -> Result<ComparisonReport> {
    tsaug.validate()?;
    let mut disruptive: Vec<&Discharge> = sample.iter().filter(|d| d.disruptive).collect();
    if disruptive.is_empty() {
        return Err(Error::InsufficientData("no disruptive shots to compare".into()));
    }
    rng.substream("compare-sample").shuffle(&mut disruptive);
    disruptive.truncate(n_samples);
    let views = rng.substream("compare-view");
    let augs = rng.substream("compare-tsaug");
    let pairs = disruptive
        .par_iter()
        .enumerate()
        .map(|(i, d)| -> Result<DtwPair> {
            let view = viewmaker::make_view(vm, d, &mut views.fork(i as u64))?;
            let aug = augbase::apply_to_discharge(tsaug, d, &mut augs.fork(i as u64))?;
            Ok(DtwPair {
                shot_id: d.id.clone(),
                view: dtw(d.samples.view(), view.samples.view(), dtw_cfg)?,
                tsaug: dtw(d.samples.view(), aug.samples.view(), dtw_cfg)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = pairs.len() as f64;
    let mean_view = pairs.iter().map(|p| p.view).sum::<f64>() / n;
    let mean_tsaug = pairs.iter().map(|p| p.tsaug).sum::<f64>() / n;
    let diffs: Vec<(f64, f64)> = pairs.iter().map(|p| (p.view, p.tsaug)).collect();
    let (wilcoxon, note) = match wilcoxon_signed_rank(&diffs) {
        Ok(w) if w.n >= MIN_REPORTED_N => (Some(w), None),
        Ok(w) => (None, Some(format!("{} nonzero differences, at least {MIN_REPORTED_N} needed", w.n))),
        Err(e) => (None, Some(e.to_string())),
    };
    Ok(ComparisonReport {
        n_pairs: pairs.len(),
        mean_view,
        mean_tsaug,
        pairs,
        wilcoxon,
        note,
    })
}
