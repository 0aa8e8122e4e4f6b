//! JSON checkpoints: the model configuration plus every named parameter
//! tensor with its shape. Floats are written in shortest round-trip form,
//! so save followed by load restores the weights bit for bit.

use crate::error::{self, CliError, Result};
use mo3tr_core::model::{ModelConfig, Mo3tr};
use mo3tr_core::tensor::Tensor;
use mo3tr_core::training::TrainingConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const FORMAT: &str = "mo3tr-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub model: ModelConfig,
    pub training: Option<TrainingConfig>,
    /// Last completed training stage, `0` for untrained weights.
    pub stage: u8,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn capture(model: &Mo3tr, training: Option<&TrainingConfig>, stage: u8) -> Self {
        Self {
            format: FORMAT.into(),
            version: VERSION,
            model: model.config.clone(),
            training: training.cloned(),
            stage,
            tensors: model
                .store
                .iter()
                .map(|(name, t)| NamedTensor {
                    name: name.to_string(),
                    shape: t.shape(),
                    data: t.data().to_vec(),
                })
                .collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        error::write(path, self.to_json())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = error::read_to_string(path)?;
        let ck: Self = serde_json::from_str(&text).map_err(|e| CliError::format(path, e.to_string()))?;
        if ck.format != FORMAT || ck.version != VERSION {
            return Err(CliError::format(
                path,
                format!("expected {FORMAT} v{VERSION}, got {} v{}", ck.format, ck.version),
            ));
        }
        Ok(ck)
    }

    /// Rebuilds the model; every parameter must be present with its shape.
    pub fn restore(&self) -> Result<Mo3tr> {
        let mut model = Mo3tr::new(self.model.clone())?;
        if self.tensors.len() != model.store.len() {
            return Err(CliError::DimensionMismatch(format!(
                "checkpoint has {} tensors, the model has {}",
                self.tensors.len(),
                model.store.len()
            )));
        }
        for nt in &self.tensors {
            let id = model
                .store
                .id(&nt.name)
                .ok_or_else(|| CliError::DimensionMismatch(format!("checkpoint tensor {} is not a model parameter", nt.name)))?;
            let slot = model.store.get_mut(id);
            if slot.shape() != nt.shape {
                return Err(CliError::DimensionMismatch(format!(
                    "tensor {} is {:?} in the checkpoint but {:?} in the model",
                    nt.name,
                    nt.shape,
                    slot.shape()
                )));
            }
            *slot = Tensor::new(nt.shape[0], nt.shape[1], nt.data.clone())?;
        }
        Ok(model)
    }
}
