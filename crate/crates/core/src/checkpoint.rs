//! JSON model checkpoints.
//!
//! Values are stored as `f64` with shortest round-trip formatting, so
//! save → load → save reproduces the file byte for byte at either precision.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelSpec};
use crate::scalar::Scalar;

pub const FORMAT: &str = "pulsegrid-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub name: String,
    pub weight_shape: Vec<usize>,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub running_mean: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub running_var: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: Option<usize>,
    pub val_mae: Option<f64>,
    pub loss: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    /// Precision the model was trained in.
    pub scalar: String,
    pub spec: ModelSpec,
    pub seed: u64,
    pub meta: CheckpointMeta,
    pub layers: Vec<LayerRecord>,
}

impl Checkpoint {
    pub fn from_model<T: Scalar>(model: &Model<T>, meta: CheckpointMeta) -> Self {
        let f = |v: &[T]| v.iter().map(|x| x.to_f64_lossy()).collect::<Vec<f64>>();
        let layers = model
            .net
            .states()
            .map(|(name, s)| LayerRecord {
                name: name.to_string(),
                weight_shape: s.weight().shape().to_vec(),
                weight: f(s.weight().data()),
                bias: f(s.bias().data()),
                running_mean: s.running_mean().map(|t| f(t.data())),
                running_var: s.running_var().map(|t| f(t.data())),
            })
            .collect();
        Checkpoint {
            format: FORMAT.into(),
            version: VERSION,
            scalar: T::NAME.into(),
            spec: model.spec,
            seed: model.seed,
            meta,
            layers,
        }
    }

    /// Rebuilds the architecture from `spec` and fills in the stored values.
    pub fn to_model<T: Scalar>(&self) -> Result<Model<T>> {
        if self.format != FORMAT || self.version != VERSION {
            return Err(Error::Data(format!(
                "not a {FORMAT} v{VERSION} file (found {} v{})",
                self.format, self.version
            )));
        }
        let mut model = Model::<T>::build(self.spec, self.seed)?;
        let n_states = model.net.states().count();
        if n_states != self.layers.len() {
            return Err(Error::Data(format!("checkpoint has {} layers, model has {n_states}", self.layers.len())));
        }
        let conv = |v: &[f64]| v.iter().map(|&x| T::from_f64_lossy(x)).collect::<Vec<T>>();
        for ((name, state), rec) in model.net.states_mut().zip(&self.layers) {
            if name != rec.name || state.weight().shape() != rec.weight_shape.as_slice() {
                return Err(Error::Data(format!(
                    "layer `{}` {:?} does not match model layer `{name}` {:?}",
                    rec.name,
                    rec.weight_shape,
                    state.weight().shape()
                )));
            }
            if rec.weight.len() != state.weight().len() || rec.bias.len() != state.bias().len() {
                return Err(Error::Data(format!("layer `{name}`: wrong number of values")));
            }
            state.weight_mut().copy_from_slice(&conv(&rec.weight));
            state.bias_mut().copy_from_slice(&conv(&rec.bias));
            match (&rec.running_mean, &rec.running_var, state.running_mean().is_some()) {
                (Some(m), Some(v), true) => state.set_running(&conv(m), &conv(v))?,
                (None, None, false) => {}
                _ => return Err(Error::Data(format!("layer `{name}`: running statistics mismatch"))),
            }
        }
        Ok(model)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
