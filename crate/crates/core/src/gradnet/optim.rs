use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use super::{Gradients, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    /// Rescale gradients whose global ℓ2 norm exceeds this value.
    pub clip_norm: Option<f64>,
}

impl OptimizerConfig {
    pub fn sgd(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            learning_rate,
            clip_norm: None,
        }
    }

    pub fn adam(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            learning_rate,
            clip_norm: None,
        }
    }

    pub fn with_clip_norm(mut self, clip: f64) -> Self {
        self.clip_norm = Some(clip);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!("clip norm must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    first: Vec<Array2<f64>>,
    second: Vec<Array2<f64>>,
    steps: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, store: &ParamStore) -> Result<Self> {
        config.validate()?;
        let zeros = || store.iter().map(|p| Array2::zeros(p.value.dim())).collect();
        Ok(Self {
            config,
            first: zeros(),
            second: zeros(),
            steps: 0,
        })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    /// Applies one update. Frozen parameters are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        if grads.len() != store.len() || grads.len() != self.first.len() {
            return Err(Error::shape(
                "optimizer",
                format!("{} gradients for {} parameters", grads.len(), store.len()),
            ));
        }
        for (p, g) in store.iter().zip(grads.iter()) {
            if p.value.dim() != g.dim() {
                return Err(Error::shape(
                    "optimizer",
                    format!("`{}` is {:?} but gradient is {:?}", p.name, p.value.dim(), g.dim()),
                ));
            }
        }
        let clip = match self.config.clip_norm {
            Some(max) => {
                let norm = grads.global_norm();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.steps += 1;
        let lr = self.config.learning_rate;
        for (i, (p, g)) in store.iter_mut().zip(grads.iter()).enumerate() {
            if p.frozen {
                continue;
            }
            match self.config.kind {
                OptimizerKind::Sgd => {
                    Zip::from(&mut p.value).and(g).for_each(|w, &g| *w -= lr * clip * g);
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let t = self.steps as i32;
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    Zip::from(&mut p.value)
                        .and(&mut self.first[i])
                        .and(&mut self.second[i])
                        .and(g)
                        .for_each(|w, m, v, &g| {
                            let g = g * clip;
                            *m = beta1 * *m + (1.0 - beta1) * g;
                            *v = beta2 * *v + (1.0 - beta2) * g * g;
                            let m_hat = *m / c1;
                            let v_hat = *v / c2;
                            *w -= lr * m_hat / (v_hat.sqrt() + eps);
                        });
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn one_param(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("p", array![[v]]);
        s
    }

    #[test]
    fn sgd_arithmetic() {
        let mut store = one_param(1.0);
        let mut opt = Optimizer::new(OptimizerConfig::sgd(0.1), &store).unwrap();
        opt.step(&mut store, &Gradients::from_vec(vec![array![[0.5]]])).unwrap();
        assert!((store.iter().next().unwrap().value[[0, 0]] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn sgd_zero_gradient_is_a_no_op() {
        let mut store = one_param(1.25);
        let mut opt = Optimizer::new(OptimizerConfig::sgd(0.3), &store).unwrap();
        opt.step(&mut store, &Gradients::from_vec(vec![array![[0.0]]])).unwrap();
        assert_eq!(store.iter().next().unwrap().value[[0, 0]], 1.25);
    }

    #[test]
    fn adam_first_step_hand_computed() {
        // m̂ = g, v̂ = g², so Δ = -lr·g/(|g| + eps)
        for &g in &[0.5, -3.0, 1e-3] {
            let mut store = one_param(2.0);
            let mut opt = Optimizer::new(OptimizerConfig::adam(0.01), &store).unwrap();
            opt.step(&mut store, &Gradients::from_vec(vec![array![[g]]])).unwrap();
            let want = 2.0 - 0.01 * g / (g.abs() + 1e-8);
            assert!((store.iter().next().unwrap().value[[0, 0]] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn rejects_bad_config_and_shapes() {
        let store = one_param(0.0);
        assert!(Optimizer::new(OptimizerConfig::sgd(0.0), &store).is_err());
        let mut store = one_param(0.0);
        let mut opt = Optimizer::new(OptimizerConfig::sgd(0.1), &store).unwrap();
        let bad = Gradients::from_vec(vec![array![[1.0, 2.0]]]);
        assert!(matches!(opt.step(&mut store, &bad), Err(Error::Shape { .. })));
    }
}
