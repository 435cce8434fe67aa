//! Central finite-difference verification of analytic gradients.

use super::{Graph, Model, ParamStore, Var};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    /// Finite-difference step `h`.
    pub step: f64,
    pub tolerance: f64,
    /// Gradient magnitudes below this are compared absolutely: the relative
    /// error is `|a - n| / max(|a|, |n|, floor)`.
    pub abs_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            abs_floor: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamError {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_index: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamError>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance
    }

    pub fn worst(&self) -> Option<&ParamError> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// Compares the gradient of the scalar built by `loss` against central
/// differences, perturbing every element of every trainable parameter.
///
/// `loss` must be a pure function of the store: any noise it uses has to be
/// drawn once outside and captured.
pub fn grad_check<F>(store: &mut ParamStore, cfg: &GradCheckConfig, loss: F) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore, &mut Graph) -> Result<Var>,
{
    check(store, |s| s, |s| s, cfg, loss)
}

/// [`grad_check`] for a model that owns its parameters.
pub fn grad_check_model<M, F>(model: &mut M, cfg: &GradCheckConfig, loss: F) -> Result<GradCheckReport>
where
    M: Model,
    F: FnMut(&M, &mut Graph) -> Result<Var>,
{
    check(model, |m| m.params(), |m| m.params_mut(), cfg, loss)
}

fn check<T, F>(
    target: &mut T,
    store: fn(&T) -> &ParamStore,
    store_mut: fn(&mut T) -> &mut ParamStore,
    cfg: &GradCheckConfig,
    mut loss: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&T, &mut Graph) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = loss(target, &mut g)?;
    g.backward(out)?;
    let analytic = g.gradients(store(target))?;

    let mut eval = |target: &T| -> Result<f64> {
        let mut g = Graph::new();
        let out = loss(target, &mut g)?;
        Ok(g.value(out)[[0, 0]])
    };

    let count = store(target).len();
    let mut params = Vec::with_capacity(count);
    for index in 0..count {
        let id = store(target).id(index);
        if store(target).get(id).frozen {
            continue;
        }
        let dim = store(target).get(id).value.dim();
        let mut worst = ParamError {
            name: store(target).get(id).name.clone(),
            max_rel_error: 0.0,
            worst_index: (0, 0),
            analytic: 0.0,
            numeric: 0.0,
        };
        for r in 0..dim.0 {
            for c in 0..dim.1 {
                let orig = store(target).get(id).value[[r, c]];
                store_mut(target).get_mut(id).value[[r, c]] = orig + cfg.step;
                let plus = eval(target)?;
                store_mut(target).get_mut(id).value[[r, c]] = orig - cfg.step;
                let minus = eval(target)?;
                store_mut(target).get_mut(id).value[[r, c]] = orig;

                let numeric = (plus - minus) / (2.0 * cfg.step);
                let a = analytic.by_index(index)[[r, c]];
                let denom = a.abs().max(numeric.abs()).max(cfg.abs_floor);
                let rel = (a - numeric).abs() / denom;
                if rel > worst.max_rel_error {
                    worst.max_rel_error = rel;
                    worst.worst_index = (r, c);
                    worst.analytic = a;
                    worst.numeric = numeric;
                }
            }
        }
        params.push(worst);
    }
    Ok(GradCheckReport {
        params,
        tolerance: cfg.tolerance,
    })
}
