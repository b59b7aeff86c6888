//! Versioned checkpoint container: every parameter tensor with its name
//! and shape, plus the exact configuration that produced it.

use super::{Result, TrainConfig, TrainError};
use crate::model::ModelParams;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

pub const CHECKPOINT_FORMAT: &str = "GREA-CKPT-1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    /// Format tag; always "GREA-CKPT-1".
    pub format: String,
    pub config: TrainConfig,
    pub num_features: usize,
    pub params: ModelParams,
}

impl Checkpoint {
    pub fn new(config: TrainConfig, num_features: usize, params: ModelParams) -> Self {
        Checkpoint { format: CHECKPOINT_FORMAT.to_string(), config, num_features, params }
    }

    /// Serialize to the canonical byte form (compact JSON + newline).
    /// Field order is fixed by the struct, so equal checkpoints produce
    /// identical bytes.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut bytes = serde_json::to_vec(self)
            .map_err(|e| TrainError::Checkpoint(format!("serialize: {e}")))?;
        bytes.push(b'\n');
        Ok(bytes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut file = std::fs::File::create(path)
            .map_err(|e| TrainError::Checkpoint(format!("create {}: {e}", path.display())))?;
        file.write_all(&bytes)
            .map_err(|e| TrainError::Checkpoint(format!("write {}: {e}", path.display())))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| TrainError::Checkpoint(format!("read {}: {e}", path.display())))?;
        let ckpt: Checkpoint = serde_json::from_slice(&bytes)
            .map_err(|e| TrainError::Checkpoint(format!("parse {}: {e}", path.display())))?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(TrainError::Checkpoint(format!(
                "unsupported format {:?}, expected {CHECKPOINT_FORMAT:?}",
                ckpt.format
            )));
        }
        Ok(ckpt)
    }
}
