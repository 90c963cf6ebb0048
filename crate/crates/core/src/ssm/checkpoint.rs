//! Checkpoint format: a JSON manifest plus a flat little-endian `f64` blob
//! holding every parameter in declaration order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{BlockSsm, ModelConfig};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "blockssm-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub params: Vec<ParamEntry>,
    pub num_scalars: usize,
    /// Parameter blob, relative to the manifest's directory.
    pub data_file: String,
}

fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

/// Writes `<path>` (manifest) and `<path>` with a `.bin` extension (values).
pub fn save_checkpoint(model: &BlockSsm, path: &Path) -> Result<CheckpointManifest> {
    let params = model
        .params()
        .iter()
        .map(|(_, p)| ParamEntry { name: p.name.clone(), rows: p.value.rows(), cols: p.value.cols() })
        .collect();
    let blob = blob_path(path);
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.to_string(),
        version: CHECKPOINT_VERSION,
        config: model.config().clone(),
        params,
        num_scalars: model.params().num_scalars(),
        data_file: blob.file_name().and_then(|s| s.to_str()).unwrap_or_default().to_string(),
    };
    let mut bytes = Vec::with_capacity(manifest.num_scalars * 8);
    for v in model.params().flatten() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(&blob, bytes)?;
    fs::write(path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn load_checkpoint(path: &Path) -> Result<BlockSsm> {
    let manifest: CheckpointManifest = serde_json::from_str(&fs::read_to_string(path)?)?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!("unknown format `{}`", manifest.format)));
    }
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {} (expected {CHECKPOINT_VERSION})",
            manifest.version
        )));
    }
    let mut model = BlockSsm::new(&manifest.config, 0)?;
    let layout_matches = model.params().len() == manifest.params.len()
        && model
            .params()
            .iter()
            .zip(&manifest.params)
            .all(|((_, p), e)| p.name == e.name && p.value.shape() == (e.rows, e.cols));
    if !layout_matches {
        return Err(Error::Checkpoint("parameter layout does not match the model config".into()));
    }
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let bytes = fs::read(dir.join(&manifest.data_file))?;
    if bytes.len() != manifest.num_scalars * 8 {
        return Err(Error::Checkpoint(format!(
            "parameter blob has {} bytes, expected {}",
            bytes.len(),
            manifest.num_scalars * 8
        )));
    }
    let values: Vec<f64> =
        bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
    model.params_mut().load_flat(&values)?;
    Ok(model)
}
