// SPDX-License-Identifier: Apache-2.0

//! JSON checkpoints: model config, every tensor (row-major), seed and epoch.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};

pub const CHECKPOINT_FORMAT: &str = "ea-lab-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorRecord {
    pub name: String,
    pub copies: usize,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub seed: u64,
    pub epoch: usize,
    pub tensors: Vec<TensorRecord>,
}

impl Checkpoint {
    pub fn new(params: &ModelParams, seed: u64, epoch: usize) -> Self {
        let tensors = params
            .layout()
            .slots()
            .iter()
            .map(|s| TensorRecord {
                name: s.name.to_string(),
                copies: s.copies,
                rows: s.rows,
                cols: s.cols,
                data: params.tensor(s).to_vec(),
            })
            .collect();
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            config: *params.config(),
            seed,
            epoch,
            tensors,
        }
    }

    /// Rebuilds the parameters, checking every tensor against the layout
    /// implied by the stored config.
    pub fn params(&self) -> Result<ModelParams> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint {} v{}",
                self.format, self.version
            )));
        }
        self.config.validate()?;
        let mut params = ModelParams::from_flat(&self.config, vec![0.0; crate::model::param_count(&self.config).total])?;
        let slots = params.layout().slots();
        if slots.len() != self.tensors.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} tensors, expected {}",
                self.tensors.len(),
                slots.len()
            )));
        }
        for (slot, rec) in slots.iter().zip(&self.tensors) {
            if rec.name != slot.name
                || (rec.copies, rec.rows, rec.cols) != (slot.copies, slot.rows, slot.cols)
                || rec.data.len() != slot.len()
            {
                return Err(Error::Config(format!(
                    "tensor `{}` does not match layout slot `{}`",
                    rec.name, slot.name
                )));
            }
            params.tensor_mut(slot).copy_from_slice(&rec.data);
        }
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
