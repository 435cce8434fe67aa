//! A small reverse-mode differentiation core for the closed set of layers the
//! viewmaker, encoder and classifiers are built from.
//!
//! Values are `f64` matrices. A [`Graph`] records operations as they execute
//! and replays them backwards; parameters live in a [`ParamStore`] owned by
//! each model and are pulled into a graph by handle.

mod checkpoint;
mod graph;
mod gradcheck;
pub mod layers;
mod optim;

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::Array2;

pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use graph::{Graph, Var};
pub(crate) use graph::contrastive_loss_value;
pub use gradcheck::{grad_check, grad_check_model, GradCheckConfig, GradCheckReport, ParamError};
pub use layers::LayerSpec;
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};

use crate::error::{Error, Result};

static NEXT_STORE_TAG: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId {
    store: u64,
    index: usize,
}

impl ParamId {
    pub fn index(self) -> usize {
        self.index
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Array2<f64>,
    pub frozen: bool,
}

/// Trainable parameters of one model, in declaration order.
#[derive(Debug)]
pub struct ParamStore {
    tag: u64,
    params: Vec<Param>,
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        // A clone is an independent model; its gradients must not be
        // confused with the original's when both appear in one graph.
        Self {
            tag: NEXT_STORE_TAG.fetch_add(1, Ordering::Relaxed),
            params: self.params.clone(),
        }
    }
}

impl PartialEq for ParamStore {
    fn eq(&self, other: &Self) -> bool {
        self.params == other.params
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            tag: NEXT_STORE_TAG.fetch_add(1, Ordering::Relaxed),
            params: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
            frozen: false,
        });
        ParamId {
            store: self.tag,
            index: self.params.len() - 1,
        }
    }

    pub fn get(&self, id: ParamId) -> &Param {
        debug_assert_eq!(id.store, self.tag, "parameter handle from another store");
        &self.params[id.index]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        debug_assert_eq!(id.store, self.tag, "parameter handle from another store");
        &mut self.params[id.index]
    }

    pub fn id(&self, index: usize) -> ParamId {
        ParamId {
            store: self.tag,
            index,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn size(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.get_mut(id).frozen = frozen;
    }

    pub fn freeze_all(&mut self, frozen: bool) {
        for p in &mut self.params {
            p.frozen = frozen;
        }
    }

    /// Overwrites values from `other`, which must have identical names and shapes.
    pub fn load_from(&mut self, other: &[Param]) -> Result<()> {
        if other.len() != self.params.len() {
            return Err(Error::Schema(format!(
                "expected {} parameter arrays, found {}",
                self.params.len(),
                other.len()
            )));
        }
        for (mine, theirs) in self.params.iter_mut().zip(other) {
            if mine.name != theirs.name || mine.value.dim() != theirs.value.dim() {
                return Err(Error::Schema(format!(
                    "parameter mismatch: expected `{}` {:?}, found `{}` {:?}",
                    mine.name,
                    mine.value.dim(),
                    theirs.name,
                    theirs.value.dim()
                )));
            }
            mine.value.assign(&theirs.value);
        }
        Ok(())
    }

    pub(crate) fn tag(&self) -> u64 {
        self.tag
    }
}

/// Gradients aligned with a [`ParamStore`]'s declaration order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    grads: Vec<Array2<f64>>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            grads: store.iter().map(|p| Array2::zeros(p.value.dim())).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.grads[id.index]
    }

    pub fn by_index(&self, index: usize) -> &Array2<f64> {
        &self.grads[index]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Array2<f64>> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.grads {
            g.mapv_inplace(|v| v * factor);
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) -> Result<()> {
        if self.grads.len() != other.grads.len() {
            return Err(Error::shape("gradients", "parameter count differs"));
        }
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            if a.dim() != b.dim() {
                return Err(Error::shape("gradients", format!("{:?} vs {:?}", a.dim(), b.dim())));
            }
            *a += b;
        }
        Ok(())
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub(crate) fn slot_mut(&mut self, index: usize) -> &mut Array2<f64> {
        &mut self.grads[index]
    }

    pub fn from_vec(grads: Vec<Array2<f64>>) -> Self {
        Self { grads }
    }
}

/// A model built from the closed layer set, owning its parameters.
pub trait Model {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    fn layer_specs(&self) -> Vec<LayerSpec>;
}
