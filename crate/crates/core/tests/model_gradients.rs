//! Finite-difference checks of complete models at toy width.

use ndarray::Array2;
use plasma_views::domain::N_CHANNELS;
use plasma_views::gradnet::{grad_check_model, GradCheckConfig, GradCheckReport, Graph, Model, Var};
use plasma_views::models::{Classifier, ClassifierKind, ClassifierSpec};
use plasma_views::viewmaker::{Encoder, EncoderConfig, ViewmakerConfig, ViewmakerModel};
use plasma_views::{Result, Rng};

const SEEDS: u64 = 20;

fn cfg() -> GradCheckConfig {
    GradCheckConfig {
        step: 1e-5,
        tolerance: 1e-4,
        abs_floor: 1e-4,
    }
}

fn random(rows: usize, cols: usize, rng: &mut Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.normal())
}

fn project(g: &mut Graph, out: Var, weights: &Array2<f64>) -> Result<Var> {
    let w = g.input(weights.clone())?;
    let prod = g.mul(out, w)?;
    g.sum(prod)
}

fn assert_passed(label: &str, seed: u64, report: GradCheckReport) {
    assert!(report.passed(), "{label} seed {seed}: worst {:?}", report.worst());
}

fn count_params<M: Model>(m: &M) -> usize {
    m.params().size()
}

#[test]
fn viewmaker_generator() {
    let vcfg = ViewmakerConfig {
        hidden: 4,
        blocks: 1,
        heads: 2,
        ff_width: 4,
        noise_channels: 1,
        smoothing_window: 3,
        decomp_window: 5,
        ..Default::default()
    };
    for seed in 0..SEEDS {
        let mut rng = Rng::new(seed);
        let mut vm = ViewmakerModel::new(vcfg, &mut rng).unwrap();
        let x = random(7, N_CHANNELS, &mut rng);
        let noise = vm.draw_noise(7, &mut rng);
        let r = random(7, N_CHANNELS, &mut rng);
        let report = grad_check_model(&mut vm, &cfg(), |m, g| {
            let v = m.view_graph(g, x.view(), &noise)?;
            project(g, v, &r)
        })
        .unwrap();
        assert_passed("viewmaker", seed, report);
    }
}

#[test]
fn encoder() {
    let ecfg = EncoderConfig {
        hidden: 4,
        blocks: 1,
        heads: 2,
        ff_width: 4,
        embedding: 3,
    };
    for seed in 0..SEEDS {
        let mut rng = Rng::new(100 + seed);
        let mut enc = Encoder::new(ecfg, &mut rng).unwrap();
        let x = random(6, N_CHANNELS, &mut rng);
        let r = random(1, 3, &mut rng);
        let report = grad_check_model(&mut enc, &cfg(), |m, g| {
            let xv = g.input(x.clone())?;
            let z = m.forward(g, xv)?;
            project(g, z, &r)
        })
        .unwrap();
        assert_passed("encoder", seed, report);
    }
}

fn check_classifier(spec: ClassifierSpec, label: &str, seed_base: u64) {
    for seed in 0..SEEDS {
        let mut rng = Rng::new(seed_base + seed);
        let mut model = Classifier::new(spec, &mut rng).unwrap();
        assert!(count_params(&model) > 0);
        let x = random(spec.window_length, N_CHANNELS, &mut rng);
        let target = if seed % 2 == 0 { 1.0 } else { 0.0 };
        let report = grad_check_model(&mut model, &cfg(), |m, g| {
            let xv = g.input(x.clone())?;
            let z = m.logit(g, xv)?;
            g.bce_with_logits(z, &[target])
        })
        .unwrap();
        assert_passed(label, seed, report);
    }
}

#[test]
fn fcn_classifier() {
    let spec = ClassifierSpec {
        window_length: 6,
        fcn_widths: [3, 4, 3],
        fcn_kernels: [3, 2, 3],
        ..Default::default()
    };
    check_classifier(spec, "fcn", 200);
}

#[test]
fn recurrent_attention_classifier() {
    let spec = ClassifierSpec {
        kind: ClassifierKind::RecurrentAttention,
        window_length: 5,
        hidden: 4,
        blocks: 2,
        heads: 2,
        ff_width: 4,
        ..Default::default()
    };
    check_classifier(spec, "recurrent-attention", 300);
}
