//! Versioned JSON checkpoints for [`MlpParams`].
//!
//! Every tensor is stored with its name and shape. Floats are written with
//! shortest round-trip formatting, so save/load is bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::mlp::{MlpArchitecture, MlpParams};
use super::train::{TrainConfig, TrainReport};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "sharpeuler-mlp";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    format: String,
    version: u32,
    architecture: MlpArchitecture,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    train_config: Option<TrainConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    train_report: Option<TrainReport>,
    tensors: Vec<TensorRecord>,
}

/// Parameters plus optional training provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: MlpParams,
    pub train_config: Option<TrainConfig>,
    pub train_report: Option<TrainReport>,
}

impl Checkpoint {
    pub fn new(params: MlpParams) -> Self {
        Self {
            params,
            train_config: None,
            train_report: None,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            architecture: self.params.architecture(),
            train_config: self.train_config,
            train_report: self.train_report.clone(),
            tensors: self
                .params
                .named_tensors()
                .into_iter()
                .map(|(name, shape, data)| TensorRecord {
                    name,
                    shape,
                    data: data.to_vec(),
                })
                .collect(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: CheckpointFile = serde_json::from_str(text)?;
        if file.format != CHECKPOINT_FORMAT || file.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint {} v{} (expected {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION})",
                file.format, file.version
            )));
        }
        file.architecture.validate()?;
        let mut params = MlpParams::zeros(file.architecture);
        let expected: Vec<(String, Vec<usize>)> = params
            .named_tensors()
            .into_iter()
            .map(|(n, s, _)| (n, s))
            .collect();
        if expected.len() != file.tensors.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} tensors, architecture needs {}",
                file.tensors.len(),
                expected.len()
            )));
        }
        for ((slot, (name, shape)), record) in
            params.slices_mut().into_iter().zip(&expected).zip(&file.tensors)
        {
            if &record.name != name || &record.shape != shape || record.data.len() != slot.len() {
                return Err(Error::Config(format!(
                    "checkpoint tensor `{}` {:?} does not match expected `{name}` {shape:?}",
                    record.name, record.shape
                )));
            }
            slot.copy_from_slice(&record.data);
        }
        if !params.is_finite() {
            return Err(Error::Numeric("checkpoint contains non-finite parameters".into()));
        }
        Ok(Self {
            params,
            train_config: file.train_config,
            train_report: file.train_report,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
