//! On-disk checkpoints: a directory holding `metadata.json` and
//! `params.safetensors`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Params;

pub const METADATA_FILE: &str = "metadata.json";
pub const PARAMS_FILE: &str = "params.safetensors";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Model family, e.g. `mae`, `classifier`, `multihead`.
    pub kind: String,
    /// Echo of the configuration that built the model.
    pub config: serde_json::Value,
    pub step: usize,
    pub epoch: usize,
    #[serde(default)]
    pub metric: Option<f64>,
    #[serde(default)]
    pub extra: serde_json::Value,
}

pub fn save_checkpoint(dir: &Path, meta: &CheckpointMeta, params: &Params) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta_path = dir.join(METADATA_FILE);
    let text = serde_json::to_string_pretty(meta)?;
    fs::write(&meta_path, text).map_err(|e| Error::io(&meta_path, e))?;
    params.save(&dir.join(PARAMS_FILE))
}

pub fn read_meta(dir: &Path) -> Result<CheckpointMeta> {
    let path = dir.join(METADATA_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

/// Loads parameter values into `params`; see [`Params::load`].
pub fn load_params(dir: &Path, params: &Params, strict: bool) -> Result<Vec<String>> {
    let path = dir.join(PARAMS_FILE);
    if !path.exists() {
        return Err(Error::Checkpoint(format!("{} not found", path.display())));
    }
    params.load(&path, strict)
}

pub fn expect_kind(meta: &CheckpointMeta, kind: &str) -> Result<()> {
    if meta.kind != kind {
        return Err(Error::Checkpoint(format!(
            "expected a {kind} checkpoint, found {}",
            meta.kind
        )));
    }
    Ok(())
}
