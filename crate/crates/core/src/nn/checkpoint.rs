//! Named-tensor archive: a little-endian f32 blob plus a JSON manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "predann-checkpoint-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the blob, in f32 elements.
    pub offset: usize,
    pub trainable: bool,
}

/// Random-stream position: every stream is derived from the root seed and
/// the counters below, so these are sufficient to resume bit-identically.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub root_seed: u64,
    pub epoch: u64,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub tensors: Vec<TensorEntry>,
    pub rng: RngState,
    #[serde(default)]
    pub meta: serde_json::Value,
}

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("json"), stem.with_extension("bin"))
}

/// Writes `<stem>.json` and `<stem>.bin`.
pub fn save_checkpoint(
    stem: &Path,
    store: &ParamStore<f32>,
    rng: RngState,
    meta: serde_json::Value,
) -> Result<()> {
    let (json_path, bin_path) = paths(stem);
    if let Some(dir) = stem.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut blob = Vec::new();
    let mut tensors = Vec::with_capacity(store.len());
    for p in store.iter() {
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            offset: blob.len() / 4,
            trainable: p.trainable,
        });
        for v in p.value.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.to_string(),
        tensors,
        rng,
        meta,
    };
    fs::write(&bin_path, &blob).map_err(|e| Error::io(&bin_path, e))?;
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&json_path, e))?;
    fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))?;
    Ok(())
}

pub fn load_checkpoint(stem: &Path) -> Result<(ParamStore<f32>, CheckpointManifest)> {
    let (json_path, bin_path) = paths(stem);
    let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| Error::json(&json_path, e))?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::data(format!(
            "{}: unknown checkpoint format {}",
            json_path.display(),
            manifest.format
        )));
    }
    let blob = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    if blob.len() % 4 != 0 {
        return Err(Error::data(format!("{}: truncated blob", bin_path.display())));
    }
    let floats: Vec<f32> = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let mut store = ParamStore::new();
    for e in &manifest.tensors {
        let n: usize = e.shape.iter().product();
        let data = floats
            .get(e.offset..e.offset + n)
            .ok_or_else(|| Error::data(format!("tensor {} exceeds blob", e.name)))?
            .to_vec();
        store.add(e.name.clone(), Tensor::new(&e.shape, data)?, e.trainable);
    }
    Ok((store, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_values_and_metadata() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ParamStore::new();
        store.add("a.weight", Tensor::new(&[2, 3], vec![1.0, -2.5, 3.25, 0.0, 1e-7, 7.0]).unwrap(), true);
        store.add("a.running_var", Tensor::new(&[1], vec![0.5]).unwrap(), false);
        let rng = RngState {
            root_seed: 42,
            epoch: 3,
            step: 17,
        };
        let stem = dir.path().join("ckpt");
        save_checkpoint(&stem, &store, rng.clone(), serde_json::json!({"stage": "pretrain"})).unwrap();
        let (back, manifest) = load_checkpoint(&stem).unwrap();
        assert_eq!(back, store);
        assert_eq!(manifest.rng, rng);
        assert_eq!(manifest.meta["stage"], "pretrain");
    }
}
