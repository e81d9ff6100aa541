//! Self-describing JSON checkpoints with a per-tensor shape manifest.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{ParamShape, RouterParams};
use super::TrainConfig;
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: RouterParams,
    pub config: TrainConfig,
    pub epoch: usize,
    pub val_f1: f64,
}

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointRecord {
    version: u32,
    config: TrainConfig,
    epoch: usize,
    val_f1: f64,
    shape: ParamShape,
    tensors: Vec<TensorRecord>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let record = CheckpointRecord {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            epoch: self.epoch,
            val_f1: self.val_f1,
            shape: self.params.shape.clone(),
            tensors: self
                .params
                .tensors()
                .into_iter()
                .map(|(name, t)| TensorRecord {
                    name,
                    shape: t.shape().to_vec(),
                    data: t.iter().copied().collect(),
                })
                .collect(),
        };
        Ok(serde_json::to_vec(&record)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_slice(bytes)?;
        match value.get("version").and_then(serde_json::Value::as_u64) {
            Some(v) if v == u64::from(CHECKPOINT_VERSION) => {}
            other => {
                return Err(Error::Version {
                    found: other.map_or_else(|| "<missing>".into(), |v| v.to_string()),
                    expected: CHECKPOINT_VERSION.to_string(),
                })
            }
        }
        let record: CheckpointRecord = serde_json::from_value(value)?;
        let mut params = RouterParams::zeros(&record.shape);
        let expected = params.tensors_mut();
        if expected.len() != record.tensors.len() {
            return Err(Error::validation(format!(
                "checkpoint holds {} tensors, shape implies {}",
                record.tensors.len(),
                expected.len()
            )));
        }
        for ((name, mut view), rec) in expected.into_iter().zip(&record.tensors) {
            if name != rec.name || view.shape() != rec.shape.as_slice() || rec.data.len() != view.len() {
                return Err(Error::validation(format!(
                    "tensor {name}: expected shape {:?}, checkpoint has {} with shape {:?}",
                    view.shape(),
                    rec.name,
                    rec.shape
                )));
            }
            for (x, &v) in view.iter_mut().zip(&rec.data) {
                *x = v;
            }
        }
        Ok(Self {
            params,
            config: record.config,
            epoch: record.epoch,
            val_f1: record.val_f1,
        })
    }

    /// Error naming the first tensor whose shape differs from `shape`.
    pub fn check_shape(&self, shape: &ParamShape) -> Result<()> {
        let want = RouterParams::zeros(shape);
        for ((name, have), (_, need)) in self.params.tensors().into_iter().zip(want.tensors()) {
            if have.shape() != need.shape() {
                return Err(Error::Config(format!(
                    "checkpoint tensor {name} has shape {:?}, configuration requires {:?}",
                    have.shape(),
                    need.shape()
                )));
            }
        }
        if self.params.layers.len() != want.layers.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} layers, configuration requires {}",
                self.params.layers.len(),
                want.layers.len()
            )));
        }
        Ok(())
    }
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = checkpoint.to_bytes()?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
