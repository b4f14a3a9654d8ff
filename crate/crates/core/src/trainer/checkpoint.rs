//! Versioned checkpoint container.
//!
//! ```text
//! magic "TTTSCKPT" | u32 version | u64 header length | JSON header
//! | f64 little-endian tensor payload | SHA-256 of everything before it
//! ```
//!
//! The header lists every tensor (parameters, then Adam first and second
//! moments) with its shape, in payload order.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use ttts_tape::ParamStore;

use super::config::{Stage, TrainConfig};
use super::optim::Adam;
use crate::model::ModelConfig;
use crate::{Error, Matrix, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TTTSCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const HASH_LEN: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum TensorKind {
    Param,
    AdamM,
    AdamV,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    kind: TensorKind,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    stage: Stage,
    step: usize,
    train_config: TrainConfig,
    model_config: ModelConfig,
    registry_hash: String,
    adam_lr: f64,
    adam_t: u64,
    triplet_history: Vec<f64>,
    tensors: Vec<TensorEntry>,
}

/// Complete training state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub step: usize,
    pub train_config: TrainConfig,
    pub model_config: ModelConfig,
    /// Registry hash of the corpus the model was trained on.
    pub registry_hash: String,
    pub params: ParamStore,
    pub adam: Adam,
    /// Triplet losses seen so far in stage II (convergence state).
    pub triplet_history: Vec<f64>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut tensors = Vec::new();
        let mut payload = Vec::new();
        let mut push = |name: &str, kind, m: &Matrix| {
            tensors.push(TensorEntry {
                name: name.to_owned(),
                kind,
                rows: m.nrows(),
                cols: m.ncols(),
            });
            for x in m.iter() {
                payload.extend_from_slice(&x.to_le_bytes());
            }
        };
        for (name, m) in self.params.iter() {
            push(name, TensorKind::Param, m);
        }
        for (name, m) in &self.adam.m {
            push(name, TensorKind::AdamM, m);
        }
        for (name, m) in &self.adam.v {
            push(name, TensorKind::AdamV, m);
        }
        let header = Header {
            stage: self.stage,
            step: self.step,
            train_config: self.train_config.clone(),
            model_config: self.model_config.clone(),
            registry_hash: self.registry_hash.clone(),
            adam_lr: self.adam.lr,
            adam_t: self.adam.t,
            triplet_history: self.triplet_history.clone(),
            tensors,
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + header.len() + payload.len() + HASH_LEN);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 + HASH_LEN {
            return Err(Error::Load(format!("file too short ({} bytes)", bytes.len())));
        }
        if &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::Load("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Load(format!(
                "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let (body, stored) = bytes.split_at(bytes.len() - HASH_LEN);
        if Sha256::digest(body).as_slice() != stored {
            return Err(Error::Load("content hash mismatch (corrupt or truncated file)".into()));
        }
        let header_len = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
        let header_end = 20usize
            .checked_add(header_len)
            .filter(|&e| e <= body.len())
            .ok_or_else(|| Error::Load("header length exceeds file".into()))?;
        let header: Header = serde_json::from_slice(&body[20..header_end]).map_err(|e| Error::Load(format!("bad header: {e}")))?;
        let mut payload = body[header_end..].chunks_exact(8);
        let mut params = ParamStore::new();
        let mut adam = Adam::new(header.adam_lr);
        adam.t = header.adam_t;
        for entry in &header.tensors {
            let n = entry.rows * entry.cols;
            let values: Vec<f64> = payload
                .by_ref()
                .take(n)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            if values.len() != n {
                return Err(Error::Load(format!("payload ends inside tensor {}", entry.name)));
            }
            let m = Matrix::from_shape_vec((entry.rows, entry.cols), values).expect("sized above");
            match entry.kind {
                TensorKind::Param => params.insert(entry.name.clone(), m),
                TensorKind::AdamM => {
                    adam.m.insert(entry.name.clone(), m);
                }
                TensorKind::AdamV => {
                    adam.v.insert(entry.name.clone(), m);
                }
            }
        }
        if payload.next().is_some() || !payload.remainder().is_empty() {
            return Err(Error::Load("trailing bytes after payload".into()));
        }
        Ok(Self {
            stage: header.stage,
            step: header.step,
            train_config: header.train_config,
            model_config: header.model_config,
            registry_hash: header.registry_hash,
            params,
            adam,
            triplet_history: header.triplet_history,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
