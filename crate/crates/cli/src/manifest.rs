use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use nestgen::trainer::{DpConfig, TrainConfig};

/// Everything needed to rerun `fit` and get the same model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub schema_path: String,
    pub data_path: String,
    pub data_format: String,
    pub model_path: String,
    pub seed: u64,
    pub train: TrainConfig,
    pub dp: Option<DpConfig>,
    pub width: usize,
    pub blocks: usize,
    pub heads: usize,
    pub init_std: f64,
    pub positional: bool,
    pub trainable_c0: bool,
    pub inputs: Vec<InputHash>,
    /// Hash over all input hashes, in order.
    pub content_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputHash {
    pub path: String,
    pub sha256: String,
}

/// Git-style object hash: `sha256("blob <len>\0" ++ bytes)`.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

pub fn hash_inputs(paths: &[&Path]) -> std::io::Result<(Vec<InputHash>, String)> {
    let mut inputs = vec![];
    let mut all = Sha256::new();
    for p in paths {
        let sha256 = blob_hash(&std::fs::read(p)?);
        all.update(sha256.as_bytes());
        inputs.push(InputHash {
            path: p.display().to_string(),
            sha256,
        });
    }
    Ok((inputs, hex::encode(all.finalize())))
}
