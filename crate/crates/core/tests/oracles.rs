//! Properties and reference-implementation agreement for the numeric kernels.

mod support;

use ndarray::Array2;
use plasma_views::analysis::{dtw, wilcoxon_signed_rank, DtwConfig};
use plasma_views::decomp::{decompose, recompose, DecompConfig};
use plasma_views::domain::{FeatureSchema, N_CHANNELS};
use plasma_views::evaluation::{f2, run_alarm, sweep_auc, AlarmConfig, ScoreSeries, ScoredShot};
use plasma_views::viewmaker::{project_l1, simclr_loss, ViewmakerConfig, ViewmakerModel};
use plasma_views::Rng;
use proptest::prelude::*;
use support::oracles;

fn matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = Rng::new(seed);
    Array2::from_shape_fn((rows, cols), |_| rng.normal())
}

#[test]
fn f2_reference_rows() {
    assert!((f2(0.446, 0.877) - 0.735).abs() <= 0.001);
    assert!((f2(0.213, 0.860) - 0.535).abs() <= 0.001);
    assert_eq!(f2(0.0, 0.0), 0.0);
}

proptest! {
    #[test]
    fn f2_closed_form(p in 0.0f64..=1.0, r in 0.0f64..=1.0) {
        prop_assume!(p + r > 0.0);
        prop_assert!((f2(p, r) - 5.0 * p * r / (4.0 * p + r)).abs() < 1e-12);
    }

    #[test]
    fn simclr_matches_double_loop(n in 1usize..=8, dim in 1usize..6, tau in 0.02f64..2.0, seed in any::<u64>()) {
        let z = matrix(2 * n, dim, seed);
        let fast = simclr_loss(z.view(), tau).unwrap();
        let slow = oracles::simclr_brute(z.view(), tau);
        prop_assert!((fast - slow).abs() < 1e-10, "{} vs {}", fast, slow);
    }

    #[test]
    fn projection_respects_budget(rows in 1usize..40, scale in 0.0f64..5.0, seed in any::<u64>()) {
        let delta = matrix(rows, N_CHANNELS, seed) * scale;
        let p = project_l1(delta.view(), 0.1);
        prop_assert!(p.iter().map(|v| v.abs()).sum::<f64>() <= 0.1 * delta.len() as f64 + 1e-9);
    }

    #[test]
    fn decomposition_is_exact(rows in 1usize..60, half in 0usize..15, seed in any::<u64>()) {
        let x = matrix(rows, 4, seed) * 100.0;
        let (trend, seasonal) = decompose(x.view(), &DecompConfig { window: 2 * half + 1 }).unwrap();
        let back = recompose(trend.view(), seasonal.view()).unwrap();
        for (a, b) in back.iter().zip(&x) {
            prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn alarm_matches_resimulation(
        scores in prop::collection::vec(0.0f64..1.0, 1..40),
        t_high in 0.05f64..0.95,
        low_frac in 0.0f64..1.0,
        h in 1usize..5,
    ) {
        let cfg = AlarmConfig { t_low: t_high * low_frac, t_high, hysteresis: h, ..Default::default() };
        let series = ScoreSeries::uniform(0.0, cfg.grid_step_ms, scores.clone()).unwrap();
        let alarm = run_alarm(&series, &cfg).unwrap();
        // Steps whose time is within dt_req of the series end cannot fire.
        let skip = (cfg.dt_req_ms / cfg.grid_step_ms).round() as usize - 1;
        let evaluable = scores.len().saturating_sub(skip);
        let expected = oracles::alarm_brute(&scores, evaluable, cfg.t_low, t_high, h);
        prop_assert_eq!(alarm.alarm_time_ms, expected.map(|k| k as f64 * cfg.grid_step_ms));
        prop_assert_eq!(alarm.fired, expected.is_some());
    }

    #[test]
    fn lowering_threshold_never_unfires(
        scores in prop::collection::vec(0.0f64..1.0, 1..40),
        hi in 0.1f64..0.95,
        drop in 0.0f64..0.1,
        h in 1usize..4,
    ) {
        let at = |t: f64| {
            let cfg = AlarmConfig { t_low: t / 2.0, t_high: t, hysteresis: h, ..Default::default() };
            run_alarm(&ScoreSeries::uniform(0.0, 5.0, scores.clone()).unwrap(), &cfg).unwrap().fired
        };
        prop_assert!(!at(hi) || at(hi - drop));
    }

    #[test]
    fn dtw_matches_path_enumeration(ta in 1usize..=6, tb in 1usize..=6, d in 1usize..4, seed in any::<u64>()) {
        let a = matrix(ta, d, seed);
        let b = matrix(tb, d, seed.wrapping_add(1));
        let fast = dtw(a.view(), b.view(), &DtwConfig::default()).unwrap();
        let slow = oracles::dtw_brute(a.view(), b.view());
        prop_assert!((fast - slow).abs() < 1e-12 * slow.max(1.0));
        prop_assert!(fast >= 0.0);
        prop_assert_eq!(fast, dtw(b.view(), a.view(), &DtwConfig::default()).unwrap());
        prop_assert_eq!(dtw(a.view(), a.view(), &DtwConfig::default()).unwrap(), 0.0);
    }

    #[test]
    fn wilcoxon_matches_sign_enumeration(n in 1usize..=12, levels in 2u32..8, seed in any::<u64>()) {
        // Quantized differences produce ties and zeros.
        let mut rng = Rng::new(seed);
        let pairs: Vec<(f64, f64)> = (0..n)
            .map(|_| ((rng.below(levels as usize) as f64) - levels as f64 / 3.0, 0.0))
            .collect();
        let diffs: Vec<f64> = pairs.iter().map(|(x, y)| x - y).collect();
        prop_assume!(diffs.iter().any(|&d| d != 0.0));
        let w = wilcoxon_signed_rank(&pairs).unwrap();
        let (w_plus, p) = oracles::wilcoxon_enum(&diffs);
        prop_assert_eq!(w.w_plus, w_plus);
        prop_assert!((w.p_value - p).abs() < 1e-12, "{} vs {}", w.p_value, p);
    }
}

#[test]
fn views_stay_within_budget_and_keep_indicators() {
    let cfg = ViewmakerConfig {
        hidden: 8,
        blocks: 1,
        heads: 2,
        ff_width: 8,
        ..Default::default()
    };
    let schema = FeatureSchema::standard();
    for seed in 0..50u64 {
        let mut rng = Rng::new(seed);
        let vm = ViewmakerModel::new(cfg, &mut rng).unwrap();
        let rows = 10 + rng.below(60);
        let x = matrix(rows, N_CHANNELS, seed) * 3.0;
        let v = vm.make_view(x.view(), &mut rng).unwrap();
        let l1: f64 = (&v - &x).iter().map(|d| d.abs()).sum();
        assert!(l1 <= cfg.budget * x.len() as f64 + 1e-9);
        for c in (0..N_CHANNELS).filter(|&c| schema.is_indicator(c)) {
            assert_eq!(v.column(c), x.column(c));
        }
    }
}

#[test]
fn auc_ignores_monotone_score_transforms() {
    let mut rng = Rng::new(11);
    let shots: Vec<ScoredShot> = (0..40)
        .map(|i| {
            let disruptive = i % 3 == 0;
            let scores: Vec<f64> = (0..30)
                .map(|k| {
                    let base = if disruptive && k > 15 { 0.6 } else { 0.3 };
                    (base + 0.3 * rng.normal()).clamp(0.0, 1.0)
                })
                .collect();
            ScoredShot {
                id: format!("s{i}"),
                scores: ScoreSeries::uniform(0.0, 5.0, scores).unwrap(),
                disruptive,
                disruption_time_ms: disruptive.then_some(150.0),
            }
        })
        .collect();
    let cfg = AlarmConfig::default();
    let (auc, _) = sweep_auc(&shots, &cfg, 49).unwrap();
    // Squaring is monotone on [0, 1], so squared scores against squared
    // thresholds must trace the same ROC.
    let grid: Vec<f64> = (1..=49).map(|k| k as f64 / 50.0).collect();
    let squared: Vec<ScoredShot> = shots
        .iter()
        .map(|s| ScoredShot {
            scores: ScoreSeries::new(s.scores.times_ms.clone(), s.scores.scores.iter().map(|v| v * v).collect()).unwrap(),
            ..s.clone()
        })
        .collect();
    let mut points = Vec::new();
    for &t in &grid {
        let c = AlarmConfig {
            t_high: t * t,
            t_low: (t / 2.0) * (t / 2.0),
            ..cfg
        };
        let (mut tp, mut fp, mut pos, mut neg) = (0.0, 0.0, 0.0, 0.0);
        for s in &squared {
            let a = run_alarm(&s.scores, &c).unwrap();
            let hit = plasma_views::evaluation::categorize(s.disruptive, &a, s.disruption_time_ms, &c);
            use plasma_views::evaluation::Category::*;
            match hit {
                TP => tp += 1.0,
                FP => fp += 1.0,
                _ => {}
            }
            if s.disruptive {
                pos += 1.0
            } else {
                neg += 1.0
            }
        }
        points.push((fp / neg, tp / pos));
    }
    let transformed = plasma_views::evaluation::trapezoid_auc(&points);
    assert!((auc - transformed).abs() < 1e-12, "{auc} vs {transformed}");
}
