//! Checkpoint directory: `manifest.json` plus `params.bin`, a concatenation
//! of little-endian `f32` arrays in manifest order.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::transformer::{ModelConfig, TransformerPolicy};
use super::vocab::Vocabulary;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const FORMAT: &str = "lexrl-checkpoint-v1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub model: ModelConfig,
    pub vocab_hash: String,
    pub step: u64,
    pub rng_state: Option<ChaCha8Rng>,
    pub tensors: Vec<TensorEntry>,
}

/// Training progress stored alongside the parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CheckpointMeta {
    pub step: u64,
    pub rng_state: Option<ChaCha8Rng>,
}

impl CheckpointMeta {
    /// Progress marker with an rng stream derived from `(seed, step)` for
    /// whichever stage continues from this checkpoint.
    pub fn at(step: u64, seed: u64) -> Self {
        CheckpointMeta {
            step,
            rng_state: Some(ChaCha8Rng::seed_from_u64(crate::exec::mix_seed(&[seed, step]))),
        }
    }
}

pub fn save<T: Scalar>(dir: impl AsRef<Path>, policy: &TransformerPolicy<T>, meta: &CheckpointMeta) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = Manifest {
        format: FORMAT.to_string(),
        model: *policy.config(),
        vocab_hash: Vocabulary::standard().fingerprint(),
        step: meta.step,
        rng_state: meta.rng_state.clone(),
        tensors: policy
            .layout()
            .iter()
            .map(|s| TensorEntry {
                name: s.name.clone(),
                shape: s.shape.clone(),
            })
            .collect(),
    };
    let mut blob = Vec::with_capacity(policy.num_parameters() * 4);
    for p in policy.parameters() {
        let x = p.to_f32().ok_or_else(|| Error::Checkpoint("parameter not representable as f32".into()))?;
        blob.extend_from_slice(&x.to_le_bytes());
    }
    let manifest_path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(&manifest_path, json + "\n").map_err(|e| Error::io(&manifest_path, e))?;
    let params_path = dir.join(PARAMS_FILE);
    fs::write(&params_path, blob).map_err(|e| Error::io(&params_path, e))
}

pub fn load<T: Scalar>(dir: impl AsRef<Path>) -> Result<(TransformerPolicy<T>, CheckpointMeta)> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format != FORMAT {
        return Err(Error::Checkpoint(format!("unknown format `{}`", manifest.format)));
    }
    if manifest.vocab_hash != Vocabulary::standard().fingerprint() {
        return Err(Error::Checkpoint("vocabulary fingerprint mismatch".into()));
    }
    let template = TransformerPolicy::<T>::new(manifest.model, 0)?;
    let expected: Vec<TensorEntry> = template
        .layout()
        .iter()
        .map(|s| TensorEntry {
            name: s.name.clone(),
            shape: s.shape.clone(),
        })
        .collect();
    if expected != manifest.tensors {
        return Err(Error::Checkpoint("tensor table does not match the model config".into()));
    }
    let params_path = dir.join(PARAMS_FILE);
    let blob = fs::read(&params_path).map_err(|e| Error::io(&params_path, e))?;
    if blob.len() != template.num_parameters() * 4 {
        return Err(Error::Checkpoint(format!(
            "expected {} bytes of parameters, found {}",
            template.num_parameters() * 4,
            blob.len()
        )));
    }
    let params = blob
        .chunks_exact(4)
        .map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    let policy = TransformerPolicy::from_parameters(manifest.model, params)?;
    Ok((
        policy,
        CheckpointMeta {
            step: manifest.step,
            rng_state: manifest.rng_state,
        },
    ))
}
