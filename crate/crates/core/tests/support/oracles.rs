//! Deliberately naive reference implementations used to cross-check the
//! optimized code paths.
#![allow(dead_code)]

use ndarray::ArrayView2;

/// Contrastive loss written directly from its definition: for every anchor,
/// `-log(exp(s⁺/τ) / Σ_{k≠i} exp(s_ik/τ))` with cosine similarity `s`,
/// averaged over all `2N` anchors.
pub fn simclr_brute(z: ArrayView2<'_, f64>, tau: f64) -> f64 {
    let n2 = z.nrows();
    let cos = |i: usize, k: usize| {
        let mut dot = 0.0;
        let mut ni = 0.0;
        let mut nk = 0.0;
        for c in 0..z.ncols() {
            dot += z[[i, c]] * z[[k, c]];
            ni += z[[i, c]] * z[[i, c]];
            nk += z[[k, c]] * z[[k, c]];
        }
        dot / (ni.sqrt() * nk.sqrt())
    };
    let mut total = 0.0;
    for i in 0..n2 {
        let partner = if i % 2 == 0 { i + 1 } else { i - 1 };
        let mut denom = 0.0;
        for k in 0..n2 {
            if k != i {
                denom += (cos(i, k) / tau).exp();
            }
        }
        total += -((cos(i, partner) / tau).exp() / denom).ln();
    }
    total / n2 as f64
}

/// Alarm decision by recomputing the hysteresis counter from scratch at
/// every step. Returns the index of the firing step.
pub fn alarm_brute(scores: &[f64], evaluable: usize, t_low: f64, t_high: f64, h: usize) -> Option<usize> {
    for k in 0..evaluable.min(scores.len()) {
        let mut counter = 0;
        for &s in &scores[..=k] {
            if s >= t_high {
                counter += 1;
            } else if s <= t_low {
                counter = 0;
            }
        }
        if counter >= h {
            return Some(k);
        }
    }
    None
}

/// Minimum over every monotone alignment path, enumerated explicitly.
pub fn dtw_brute(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> f64 {
    fn walk(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, i: usize, j: usize, acc: f64, best: &mut f64) {
        let cost: f64 = a.row(i).iter().zip(b.row(j)).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        let acc = acc + cost;
        if i + 1 == a.nrows() && j + 1 == b.nrows() {
            *best = best.min(acc);
            return;
        }
        if i + 1 < a.nrows() {
            walk(a, b, i + 1, j, acc, best);
        }
        if j + 1 < b.nrows() {
            walk(a, b, i, j + 1, acc, best);
        }
        if i + 1 < a.nrows() && j + 1 < b.nrows() {
            walk(a, b, i + 1, j + 1, acc, best);
        }
    }
    let mut best = f64::INFINITY;
    walk(a, b, 0, 0, 0.0, &mut best);
    best
}

/// Two-sided signed-rank p by listing all 2ⁿ sign patterns of the nonzero
/// differences, with midranks computed by counting.
pub fn wilcoxon_enum(diffs: &[f64]) -> (f64, f64) {
    let d: Vec<f64> = diffs.iter().copied().filter(|&v| v != 0.0).collect();
    let n = d.len();
    let rank = |v: f64| {
        let less = d.iter().filter(|x| x.abs() < v.abs()).count() as f64;
        let equal = d.iter().filter(|x| x.abs() == v.abs()).count() as f64;
        less + (equal + 1.0) / 2.0
    };
    let ranks: Vec<f64> = d.iter().map(|&v| rank(v)).collect();
    let observed: f64 = d.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    let (mut le, mut ge) = (0u64, 0u64);
    for mask in 0u64..(1 << n) {
        let w: f64 = (0..n).filter(|&k| mask >> k & 1 == 1).map(|k| ranks[k]).sum();
        if w <= observed + 1e-9 {
            le += 1;
        }
        if w >= observed - 1e-9 {
            ge += 1;
        }
    }
    let total = (1u64 << n) as f64;
    (observed, (2.0 * le.min(ge) as f64 / total).min(1.0))
}
