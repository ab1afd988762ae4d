//! JSON checkpoints: model config plus every parameter by name.
//!
//! Values are stored as f64 whatever the run precision, so f32 and f64
//! parameters both reload bit-exactly.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{init_params, ModelConfig, ModelParams};
use crate::scalar::Scalar;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StoredTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub precision: String,
    pub model_config: ModelConfig,
    /// Free-form provenance (training config, step count, ...).
    #[serde(default)]
    pub meta: serde_json::Value,
    pub params: Vec<StoredTensor>,
}

impl Checkpoint {
    pub fn from_params<T: Scalar>(cfg: &ModelConfig, params: &ModelParams<T>, meta: serde_json::Value) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            precision: T::NAME.to_string(),
            model_config: cfg.clone(),
            meta,
            params: params
                .named()
                .into_iter()
                .map(|(name, _, t)| StoredTensor {
                    name,
                    shape: t.shape().to_vec(),
                    data: t.to_f64_vec(),
                })
                .collect(),
        }
    }

    /// Rebuild parameters, checking every name and shape against the config.
    pub fn params<T: Scalar>(&self) -> Result<ModelParams<T>> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Corrupt(format!("unsupported checkpoint version {}", self.version)));
        }
        self.model_config.validate()?;
        let mut params = init_params::<T>(&self.model_config, 0)?;
        let names: Vec<String> = params.named().into_iter().map(|(n, _, _)| n).collect();
        if names.len() != self.params.len() {
            return Err(Error::Corrupt(format!(
                "expected {} tensors, found {}",
                names.len(),
                self.params.len()
            )));
        }
        for ((name, slot), stored) in names.iter().zip(params.tensors_mut()).zip(&self.params) {
            if *name != stored.name || slot.shape() != stored.shape.as_slice() || stored.data.len() != slot.numel() {
                return Err(Error::Corrupt(format!("tensor {:?} does not match {name}", stored.name)));
            }
            for (d, &s) in slot.data_mut().iter_mut().zip(&stored.data) {
                *d = T::from_f64_lossy(s);
            }
        }
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(f, self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        serde_json::from_reader(f).map_err(|e| Error::Corrupt(format!("{}: {e}", path.display())))
    }
}
