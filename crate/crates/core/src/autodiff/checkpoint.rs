//! Parameter checkpoints: `manifest.json` plus one little-endian `f64` blob per parameter.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::{AutodiffError, Result, Tensor};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub parameters: Vec<ManifestEntry>,
}

fn blob_name(index: usize, name: &str) -> String {
    let clean: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    format!("{index:04}_{clean}.bin")
}

pub fn save_checkpoint(store: &ParamStore, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut parameters = Vec::with_capacity(store.len());
    for (i, p) in store.iter().enumerate() {
        let file = blob_name(i, &p.name);
        let bytes: Vec<u8> = p.value.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(dir.join(&file), bytes)?;
        parameters.push(ManifestEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            file,
        });
    }
    let manifest = serde_json::to_string_pretty(&Manifest { parameters })?;
    fs::write(dir.join(MANIFEST_FILE), manifest)?;
    Ok(())
}

/// Reads a checkpoint into a fresh store (gradients and moments zero).
pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<ParamStore> {
    let dir = dir.as_ref();
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    let mut store = ParamStore::new();
    for entry in manifest.parameters {
        let bytes = fs::read(dir.join(&entry.file))?;
        if bytes.len() % 8 != 0 {
            return Err(AutodiffError::Checkpoint(format!("{} is not a whole number of f64s", entry.file)));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let value = Tensor::new(entry.shape, data)
            .map_err(|e| AutodiffError::Checkpoint(format!("{}: {e}", entry.name)))?;
        store.add(entry.name, value);
    }
    Ok(store)
}

/// Overwrites the values of `store` from a checkpoint with identical names and shapes.
pub fn load_into(store: &mut ParamStore, dir: impl AsRef<Path>) -> Result<()> {
    let loaded = load_checkpoint(dir)?;
    if loaded.len() != store.len() {
        return Err(AutodiffError::Checkpoint(format!(
            "checkpoint has {} parameters, model has {}",
            loaded.len(),
            store.len()
        )));
    }
    for (id, src) in store.ids().collect::<Vec<_>>().into_iter().zip(loaded.iter()) {
        let dst = store.get_mut(id);
        if dst.name != src.name || dst.value.shape() != src.value.shape() {
            return Err(AutodiffError::Checkpoint(format!(
                "parameter {} {:?} does not match checkpoint entry {} {:?}",
                dst.name,
                dst.value.shape(),
                src.name,
                src.value.shape()
            )));
        }
        dst.value = src.value.clone();
    }
    Ok(())
}
