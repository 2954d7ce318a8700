use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelParameters, Network, PretrainConfig};
use crate::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainMeta {
    pub config: PretrainConfig,
    pub val_accuracy: f64,
}

/// Pretrained model on disk. JSON layout is described in `docs/FORMATS.md`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub network: Network,
    pub params: ModelParameters,
    pub seed: u64,
    pub pretrain: PretrainMeta,
}

impl Checkpoint {
    pub fn new(network: Network, params: ModelParameters, seed: u64, pretrain: PretrainMeta) -> Result<Self> {
        network.check_params(&params)?;
        Ok(Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            network,
            params,
            seed,
            pretrain,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(text)?;
        if ckpt.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint format {} is not supported (expected {})",
                ckpt.format_version, CHECKPOINT_FORMAT_VERSION
            )));
        }
        ckpt.network.check_params(&ckpt.params)?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}
