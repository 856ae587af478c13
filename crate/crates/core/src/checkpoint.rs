//! Self-describing weight archives: named arrays, the architecture and the
//! training hyperparameters, stored as a single JSON document.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::ParamStore;
use crate::train::Hyperparams;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub model: ModelConfig,
    pub hyperparams: Hyperparams,
    /// Optimizer steps taken when the archive was written.
    pub step: usize,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn new(model: &Model, hyperparams: &Hyperparams, step: usize) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            model: model.cfg.clone(),
            hyperparams: hyperparams.clone(),
            step,
            params: model.params.clone(),
        }
    }

    pub fn into_model(self) -> Model {
        Model {
            cfg: self.model,
            params: self.params,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::Checkpoint(e.to_string()))?;
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if ckpt.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {} (expected {FORMAT_VERSION})",
                ckpt.format_version
            )));
        }
        let reference = Model::new(&ckpt.model, 0);
        for (name, value) in reference.params.iter() {
            match ckpt.params.get(name) {
                Some(v) if v.shape() == value.shape() => {}
                Some(v) => {
                    return Err(Error::Checkpoint(format!(
                        "parameter {name} has shape {:?}, expected {:?}",
                        v.shape(),
                        value.shape()
                    )))
                }
                None => return Err(Error::Checkpoint(format!("missing parameter {name}"))),
            }
        }
        if !ckpt.params.all_finite() {
            return Err(Error::Checkpoint("non-finite parameter values".into()));
        }
        Ok(ckpt)
    }
}
