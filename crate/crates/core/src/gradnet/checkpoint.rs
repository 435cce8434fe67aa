//! Model checkpoints: one JSON document holding a format tag and version, the
//! model's configuration, its layer specs, and every parameter array in
//! declaration order. Floats are written in shortest round-trip decimal form,
//! so save/load is bit-exact.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{LayerSpec, Model, Param};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "plasma-views-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StoredParam {
    name: String,
    shape: [usize; 2],
    values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    format: String,
    version: u32,
    /// Model family, e.g. `viewmaker` or `classifier`.
    pub model: String,
    pub config: serde_json::Value,
    pub layers: Vec<LayerSpec>,
    params: Vec<StoredParam>,
}

impl Checkpoint {
    pub fn capture<M: Model, C: Serialize>(model_kind: &str, config: &C, model: &M) -> Result<Self> {
        Ok(Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            model: model_kind.into(),
            config: serde_json::to_value(config)?,
            layers: model.layer_specs(),
            params: model
                .params()
                .iter()
                .map(|p| StoredParam {
                    name: p.name.clone(),
                    shape: [p.value.nrows(), p.value.ncols()],
                    values: p.value.iter().copied().collect(),
                })
                .collect(),
        })
    }

    pub fn config<C: DeserializeOwned>(&self) -> Result<C> {
        Ok(serde_json::from_value(self.config.clone())?)
    }

    /// Copies parameters into `model`, which must have the same architecture.
    pub fn restore<M: Model>(&self, model: &mut M) -> Result<()> {
        if self.layers != model.layer_specs() {
            return Err(Error::Schema(format!(
                "checkpoint layer specs do not match the `{}` model being restored",
                self.model
            )));
        }
        let params = self
            .params
            .iter()
            .map(|p| {
                let value = Array2::from_shape_vec((p.shape[0], p.shape[1]), p.values.clone())
                    .map_err(|e| Error::Schema(format!("parameter `{}`: {e}", p.name)))?;
                Ok(Param {
                    name: p.name.clone(),
                    value,
                    frozen: false,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        model.params_mut().load_from(&params)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Schema(format!("not a checkpoint file (format `{}`)", ck.format)));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Schema(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
