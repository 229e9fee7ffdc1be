//! Checkpoints: a JSON manifest plus one little-endian f64 blob holding every
//! parameter back to back in manifest order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::ParameterStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "checkpoint.json";
pub const BLOB_FILE: &str = "params.bin";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CheckpointManifest {
    pub format: String,
    pub dtype: String,
    pub seed: u64,
    pub params: Vec<ParamEntry>,
    /// Free-form metadata, typically the model and training configuration.
    #[serde(default)]
    pub metadata: serde_json::Value,
}

pub fn save_checkpoint(dir: &Path, store: &ParameterStore, seed: u64, metadata: serde_json::Value) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = CheckpointManifest {
        format: "mdf-checkpoint-v1".into(),
        dtype: "f64".into(),
        seed,
        params: store
            .iter()
            .map(|(name, p)| ParamEntry {
                name: name.to_string(),
                shape: p.value.shape().to_vec(),
            })
            .collect(),
        metadata,
    };
    let mpath = dir.join(MANIFEST_FILE);
    fs::write(&mpath, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&mpath, e))?;

    let bpath = dir.join(BLOB_FILE);
    let mut buf = Vec::with_capacity(store.num_scalars() * 8);
    for (_, p) in store.iter() {
        for v in p.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(&bpath).map_err(|e| Error::io(&bpath, e))?;
    f.write_all(&buf).map_err(|e| Error::io(&bpath, e))?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(ParameterStore, CheckpointManifest)> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: CheckpointManifest = serde_json::from_slice(&text)?;
    if manifest.dtype != "f64" {
        return Err(Error::Format(format!("unsupported dtype {}", manifest.dtype)));
    }
    let bpath = dir.join(BLOB_FILE);
    let blob = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
    let total: usize = manifest.params.iter().map(|p| p.shape.iter().product::<usize>()).sum();
    if blob.len() != total * 8 {
        return Err(Error::Format(format!(
            "blob holds {} bytes, manifest declares {} values",
            blob.len(),
            total
        )));
    }
    let mut store = ParameterStore::new();
    let mut off = 0;
    for entry in &manifest.params {
        let n: usize = entry.shape.iter().product();
        let data = blob[off * 8..(off + n) * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        store.insert(entry.name.clone(), Tensor::new(entry.shape.clone(), data)?)?;
        off += n;
    }
    Ok((store, manifest))
}
