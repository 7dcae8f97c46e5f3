//! Checkpoint directories: `manifest.json` plus one OSTN file per tensor.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::codec::CodecConfig;
use crate::numerics::{ostn, NumericsError, Scalar};
use crate::triattn::{ModelConfig, TriAttnDit};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("checkpoint tensor: {0}")]
    Tensor(#[from] NumericsError),
    #[error("checkpoint config hash {found} does not match expected {expected}")]
    ConfigMismatch { expected: String, found: String },
    #[error("checkpoint corrupt: {0}")]
    Corrupt(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: u32,
    pub model: ModelConfig,
    pub codec: CodecConfig,
    pub config_hash: String,
    /// sha256 over the tensor files in manifest order.
    pub content_hash: String,
    pub tensors: Vec<TensorEntry>,
}

/// sha256 of the canonical JSON of both configurations.
pub fn config_hash(model: &ModelConfig, codec: &CodecConfig) -> String {
    let json = serde_json::to_vec(&(model, codec)).expect("configs serialize");
    hex::encode(Sha256::digest(json))
}

pub fn save_checkpoint<T: Scalar>(
    dir: &Path,
    model: &TriAttnDit<T>,
    codec: &CodecConfig,
) -> Result<CheckpointManifest, CheckpointError> {
    fs::create_dir_all(dir)?;
    let mut hasher = Sha256::new();
    let mut tensors = Vec::new();
    for id in model.store.ids() {
        let name = model.store.name(id).to_string();
        let file = format!("{:04}_{}.ostn", id.0, name.replace('.', "_"));
        let t = model.store.get(id);
        let bytes = ostn::encode(t);
        hasher.update(&bytes);
        fs::write(dir.join(&file), bytes)?;
        tensors.push(TensorEntry { name, file, shape: t.shape().to_vec(), trainable: model.store.is_trainable(id) });
    }
    let manifest = CheckpointManifest {
        format: 1,
        model: model.cfg.clone(),
        codec: codec.clone(),
        config_hash: config_hash(&model.cfg, codec),
        content_hash: hex::encode(hasher.finalize()),
        tensors,
    };
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Loads a checkpoint. With `expect`, the stored configuration must hash to
/// the same value as the given one.
pub fn load_checkpoint(
    dir: &Path,
    expect: Option<(&ModelConfig, &CodecConfig)>,
) -> Result<(TriAttnDit<f32>, CheckpointManifest), CheckpointError> {
    let manifest: CheckpointManifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST))?)?;
    let stored = config_hash(&manifest.model, &manifest.codec);
    if stored != manifest.config_hash {
        return Err(CheckpointError::Corrupt("manifest configs do not match their hash".into()));
    }
    if let Some((m, c)) = expect {
        let expected = config_hash(m, c);
        if expected != stored {
            return Err(CheckpointError::ConfigMismatch { expected, found: stored });
        }
    }
    let mut model = TriAttnDit::<f32>::new(manifest.model.clone(), 0)?;
    if model.store.len() != manifest.tensors.len() {
        return Err(CheckpointError::Corrupt(format!(
            "{} tensors stored, architecture has {}",
            manifest.tensors.len(),
            model.store.len()
        )));
    }
    let mut hasher = Sha256::new();
    for entry in &manifest.tensors {
        let id = model
            .store
            .find(&entry.name)
            .ok_or_else(|| CheckpointError::Corrupt(format!("unknown tensor {}", entry.name)))?;
        let bytes = fs::read(dir.join(&entry.file))?;
        hasher.update(&bytes);
        let t = ostn::decode(&bytes)?;
        if t.shape() != entry.shape.as_slice() {
            return Err(CheckpointError::Corrupt(format!("{} shape differs from manifest", entry.name)));
        }
        model.store.set(id, t)?;
    }
    if hex::encode(hasher.finalize()) != manifest.content_hash {
        return Err(CheckpointError::Corrupt("content hash mismatch".into()));
    }
    Ok((model, manifest))
}
