use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataio::{write_atomic, Vocabulary};
use crate::diffcore::{Moments, ParameterStore};
use crate::error::{Error, Result};
use crate::model::{AblationVariant, Model, ModelConfig};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Hex SHA-256 of the little-endian value bytes.
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub values: Vec<f64>,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub model: ModelConfig,
    pub feature_dim: usize,
    pub variant: AblationVariant,
    pub step: u64,
    pub vocab: Vocabulary,
    pub manifest: Vec<ManifestEntry>,
    pub tensors: Vec<TensorRecord>,
}

pub fn values_checksum(values: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in values {
        h.update(v.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// A model restored from a checkpoint.
pub struct Restored {
    pub store: ParameterStore,
    pub model: Model,
    pub config: ModelConfig,
    pub variant: AblationVariant,
    pub vocab: Vocabulary,
}

impl Checkpoint {
    pub fn capture(
        store: &ParameterStore,
        config: &ModelConfig,
        feature_dim: usize,
        variant: AblationVariant,
        vocab: &Vocabulary,
    ) -> Self {
        let manifest = store
            .ids()
            .map(|id| ManifestEntry {
                name: store.name(id).to_string(),
                shape: store.shape(id).to_vec(),
                sha256: values_checksum(store.values(id)),
            })
            .collect();
        let tensors = store
            .ids()
            .map(|id| TensorRecord {
                values: store.values(id).to_vec(),
                first_moment: store.moments(id).first.clone(),
                second_moment: store.moments(id).second.clone(),
            })
            .collect();
        Checkpoint {
            version: CHECKPOINT_VERSION,
            model: config.clone(),
            feature_dim,
            variant,
            step: store.step(),
            vocab: vocab.clone(),
            manifest,
            tensors,
        }
    }

    /// Rebuilds the parameter store, checking names, shapes and checksums.
    pub fn restore(self) -> Result<Restored> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Validation(format!(
                "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                self.version
            )));
        }
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = Model::register(&mut store, self.vocab.len(), &self.model, self.feature_dim, &mut rng)?;
        if store.len() != self.manifest.len() || self.tensors.len() != self.manifest.len() {
            return Err(Error::Validation(format!(
                "checkpoint lists {} tensors, the model has {}",
                self.manifest.len(),
                store.len()
            )));
        }
        let ids: Vec<_> = store.ids().collect();
        for ((id, entry), record) in ids.into_iter().zip(&self.manifest).zip(self.tensors) {
            if store.name(id) != entry.name || store.shape(id) != entry.shape.as_slice() {
                return Err(Error::Validation(format!(
                    "checkpoint tensor `{}` {:?} does not match model tensor `{}` {:?}",
                    entry.name,
                    entry.shape,
                    store.name(id),
                    store.shape(id)
                )));
            }
            if record.values.len() != store.values(id).len() || values_checksum(&record.values) != entry.sha256 {
                return Err(Error::Validation(format!("checksum mismatch for `{}`", entry.name)));
            }
            store.values_mut(id).copy_from_slice(&record.values);
            store.restore_moments(
                id,
                Moments {
                    first: record.first_moment,
                    second: record.second_moment,
                },
            )?;
        }
        store.set_step(self.step);
        Ok(Restored {
            store,
            model,
            config: self.model,
            variant: self.variant,
            vocab: self.vocab,
        })
    }
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    let json = serde_json::to_vec(checkpoint)?;
    write_atomic(path, &json)
}

pub fn load_checkpoint(path: &Path) -> Result<Restored> {
    let text = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let ck: Checkpoint = serde_json::from_slice(&text)?;
    ck.restore()
}
