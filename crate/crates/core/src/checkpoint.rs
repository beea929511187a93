//! Checkpoint container.
//!
//! A checkpoint is one JSON document:
//!
//! ```text
//! {
//!   "format": "clickseg-checkpoint",
//!   "version": 1,
//!   "config": { ...ModelConfig... },
//!   "metadata": { free-form key/value pairs },
//!   "tensors": [ { "name": "...", "shape": [rows, cols], "data": "<base64>" } ]
//! }
//! ```
//!
//! `data` holds the row-major values as little-endian IEEE-754 doubles,
//! base64 encoded, so values round-trip bit-exactly. The checkpoint hash
//! is the lowercase hex SHA-256 of the serialized document.

use std::collections::BTreeMap;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::model::{Model, ModelConfig};
use crate::params::TensorRecord;
use crate::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "clickseg-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncodedTensor {
    pub name: String,
    pub shape: [usize; 2],
    pub data: String,
}

impl EncodedTensor {
    fn encode(rec: &TensorRecord) -> Self {
        let bytes: Vec<u8> = rec.data.iter().flat_map(|v| v.to_le_bytes()).collect();
        EncodedTensor {
            name: rec.name.clone(),
            shape: rec.shape,
            data: STANDARD.encode(bytes),
        }
    }

    fn decode(&self) -> Result<TensorRecord> {
        let bytes = STANDARD
            .decode(&self.data)
            .map_err(|e| Error::invalid(format!("tensor {}: {e}", self.name)))?;
        if bytes.len() != self.shape[0] * self.shape[1] * 8 {
            return Err(Error::invalid(format!(
                "tensor {} holds {} bytes for shape {:?}",
                self.name,
                bytes.len(),
                self.shape
            )));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Ok(TensorRecord {
            name: self.name.clone(),
            shape: self.shape,
            data,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    #[serde(default)]
    pub metadata: BTreeMap<String, serde_json::Value>,
    pub tensors: Vec<EncodedTensor>,
}

/// Identity of a loaded model as reported by the service.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelIdentity {
    pub hash: String,
    pub format: String,
    pub version: u32,
    pub parameters: usize,
    pub config: ModelConfig,
    pub metadata: BTreeMap<String, serde_json::Value>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, metadata: BTreeMap<String, serde_json::Value>) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            config: model.config.clone(),
            metadata,
            tensors: model.store.to_records().iter().map(EncodedTensor::encode).collect(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec_pretty(self)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_slice(bytes)?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::invalid(format!("not a checkpoint (format {:?})", ckpt.format)));
        }
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::invalid(format!("unsupported checkpoint version {}", ckpt.version)));
        }
        Ok(ckpt)
    }

    /// Builds the model and loads every tensor.
    pub fn to_model(&self) -> Result<Model> {
        let mut model = Model::new(self.config.clone(), 0)?;
        let records = self.tensors.iter().map(EncodedTensor::decode).collect::<Result<Vec<_>>>()?;
        model.store.load_records(&records)?;
        if !model.store.all_finite() {
            return Err(Error::invalid("checkpoint contains non-finite parameters"));
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<String> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, &bytes)?;
        Ok(hash_bytes(&bytes))
    }

    /// Reads a checkpoint and returns it with the hash of the file.
    pub fn load(path: impl AsRef<Path>) -> Result<(Self, String)> {
        let bytes = std::fs::read(path)?;
        Ok((Self::from_bytes(&bytes)?, hash_bytes(&bytes)))
    }

    pub fn identity(&self, hash: String) -> ModelIdentity {
        ModelIdentity {
            hash,
            format: self.format.clone(),
            version: self.version,
            parameters: self.tensors.iter().map(|t| t.shape[0] * t.shape[1]).sum(),
            config: self.config.clone(),
            metadata: self.metadata.clone(),
        }
    }
}

pub fn hash_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
