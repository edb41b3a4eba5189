//! Checkpoint bundles: a directory holding one tensor file per parameter
//! plus a JSON manifest. Parameters are stored in 32-bit precision; file
//! naming and manifest layout are deterministic so identical runs produce
//! byte-identical checkpoints.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::Params;
use crate::tensor_io::{read_tensor, write_tensor, DType};

#[derive(Debug, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub kind: String,
    pub meta: serde_json::Value,
    /// Parameter name -> tensor file name.
    pub tensors: BTreeMap<String, String>,
}

pub struct Checkpoint {
    pub kind: String,
    pub meta: serde_json::Value,
    pub params: Params,
}

pub fn save_checkpoint(dir: &Path, kind: &str, meta: &serde_json::Value, params: &Params) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut tensors = BTreeMap::new();
    for (i, (name, t)) in params.iter().enumerate() {
        let file = format!("tensor_{i:04}.mvt");
        write_tensor(&dir.join(&file), t, DType::F32)?;
        tensors.insert(name.clone(), file);
    }
    let manifest = CheckpointManifest {
        kind: kind.to_string(),
        meta: meta.clone(),
        tensors,
    };
    let mut bytes = serde_json::to_vec_pretty(&manifest)?;
    bytes.push(b'\n');
    fs::write(dir.join("manifest.json"), bytes)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest_path = dir.join("manifest.json");
    let data = fs::read(&manifest_path)
        .map_err(|e| Error::Input(format!("{}: {e}", manifest_path.display())))?;
    let manifest: CheckpointManifest = serde_json::from_slice(&data)?;
    let mut params = Params::new();
    for (name, file) in &manifest.tensors {
        params.insert(name, read_tensor(&dir.join(file))?);
    }
    Ok(Checkpoint { kind: manifest.kind, meta: manifest.meta, params })
}
