//! Checkpoint directories: `meta.json` index plus `params.bin` payload.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::IxDyn;
use serde::{Deserialize, Serialize};

use super::params::ParameterStore;
use super::tape::Array;
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const META_FILE: &str = "meta.json";
pub const PARAMS_FILE: &str = "params.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into `params.bin`.
    pub offset: u64,
    pub requires_grad: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub config: serde_json::Value,
    pub parameter_count: usize,
    pub tensors: BTreeMap<String, TensorEntry>,
}

pub fn save_checkpoint(dir: &Path, store: &ParameterStore, config: serde_json::Value) -> Result<CheckpointMeta> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut bytes = Vec::new();
    let mut tensors = BTreeMap::new();
    for (name, t) in store.iter() {
        tensors.insert(
            name.to_string(),
            TensorEntry {
                shape: t.shape().to_vec(),
                dtype: "f32".into(),
                offset: bytes.len() as u64,
                requires_grad: t.requires_grad,
            },
        );
        for &v in t.data.iter() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let meta = CheckpointMeta {
        format_version: FORMAT_VERSION,
        config,
        parameter_count: store.parameter_count(""),
        tensors,
    };
    let params_path = dir.join(PARAMS_FILE);
    fs::write(&params_path, &bytes).map_err(|e| Error::io(&params_path, e))?;
    let meta_path = dir.join(META_FILE);
    let text = serde_json::to_string_pretty(&meta)?;
    fs::write(&meta_path, text).map_err(|e| Error::io(&meta_path, e))?;
    Ok(meta)
}

pub fn read_meta(dir: &Path) -> Result<CheckpointMeta> {
    let meta_path = dir.join(META_FILE);
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text)?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {}",
            meta.format_version
        )));
    }
    Ok(meta)
}

pub fn load_checkpoint(dir: &Path) -> Result<(ParameterStore, CheckpointMeta)> {
    let meta = read_meta(dir)?;
    let params_path = dir.join(PARAMS_FILE);
    let bytes = fs::read(&params_path).map_err(|e| Error::io(&params_path, e))?;
    let mut store = ParameterStore::new();
    for (name, entry) in &meta.tensors {
        if entry.dtype != "f32" {
            return Err(Error::Checkpoint(format!("{name}: unsupported dtype {}", entry.dtype)));
        }
        let n: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + 4 * n;
        let chunk = bytes
            .get(start..end)
            .ok_or_else(|| Error::Checkpoint(format!("{name}: payload truncated")))?;
        let values: Vec<f64> = chunk
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        let data = Array::from_shape_vec(IxDyn(&entry.shape), values)
            .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        store.insert(name.clone(), data, entry.requires_grad)?;
    }
    if store.parameter_count("") != meta.parameter_count {
        return Err(Error::Checkpoint(format!(
            "parameter count {} does not match index ({})",
            meta.parameter_count,
            store.parameter_count("")
        )));
    }
    Ok((store, meta))
}
