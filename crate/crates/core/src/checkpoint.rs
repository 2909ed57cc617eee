//! Versioned JSON checkpoints: config echo, step, seed and named tensors.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::training::TrainConfig;

pub const FORMAT: &str = "vic-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: TrainConfig,
    pub step: usize,
    pub seed: u64,
    /// Mean total loss of the last epoch, when known.
    pub final_loss: Option<f64>,
    pub tensors: Vec<Tensor>,
}

impl Checkpoint {
    pub fn new(params: &ModelParams, config: &TrainConfig, step: usize, final_loss: Option<f64>) -> Self {
        let tensors = params
            .tensors()
            .into_iter()
            .map(|(name, a)| Tensor {
                name,
                shape: [a.nrows(), a.ncols()],
                data: a.iter().copied().collect(),
            })
            .collect();
        Checkpoint {
            format: FORMAT.into(),
            version: VERSION,
            config: config.clone(),
            step,
            seed: config.seed,
            final_loss,
            tensors,
        }
    }

    /// Rebuilds parameters, checking every name and shape against the
    /// layout implied by `model`.
    pub fn params_for(&self, model: &ModelConfig) -> Result<ModelParams> {
        if self.format != FORMAT || self.version != VERSION {
            return Err(Error::Version(format!(
                "expected {FORMAT} v{VERSION}, found {} v{}",
                self.format, self.version
            )));
        }
        let mut params = ModelParams::init(model, 0)?;
        let slots = params.tensors_mut();
        if slots.len() != self.tensors.len() {
            return Err(Error::Version(format!(
                "checkpoint holds {} tensors but the model has {}",
                self.tensors.len(),
                slots.len()
            )));
        }
        for ((name, slot), t) in slots.into_iter().zip(&self.tensors) {
            if name != t.name || [slot.nrows(), slot.ncols()] != t.shape {
                return Err(Error::Version(format!(
                    "tensor {} {:?} does not fit model slot {name} {:?}",
                    t.name,
                    t.shape,
                    slot.dim()
                )));
            }
            *slot = Array2::from_shape_vec((t.shape[0], t.shape[1]), t.data.clone())
                .map_err(|e| Error::Version(format!("tensor {}: {e}", t.name)))?;
        }
        Ok(params)
    }

    pub fn params(&self) -> Result<ModelParams> {
        self.params_for(&self.config.model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::Serde(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Serde(format!("{}: {e}", path.display())))
    }
}
