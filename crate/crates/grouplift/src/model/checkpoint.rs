//! Checkpoints: one safetensors archive holding every parameter tensor by name,
//! with a JSON manifest stored under the `manifest` metadata key.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use candle_core::{DType, Device};
use serde::{Deserialize, Serialize};

use super::{Denoiser, ModelConfig, ParamStore};
use crate::error::{Error, Result};
use crate::pose::RootNormStats;

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;
const MANIFEST_KEY: &str = "manifest";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub schema_version: u32,
    pub config: ModelConfig,
    pub root_norm: RootNormStats,
    /// Free-form training metadata (config, seed, epochs run, ...).
    #[serde(default)]
    pub training: serde_json::Value,
}

fn st_err(e: safetensors::SafeTensorError) -> Error {
    Error::Checkpoint(e.to_string())
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &Denoiser, training: serde_json::Value) -> Result<()> {
    let path = path.as_ref();
    let manifest = CheckpointManifest {
        schema_version: CHECKPOINT_SCHEMA_VERSION,
        config: model.config().clone(),
        root_norm: *model.root_norm(),
        training,
    };
    let mut info = HashMap::new();
    info.insert(MANIFEST_KEY.to_string(), serde_json::to_string(&manifest)?);
    let tensors = model.params().snapshot()?;
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    safetensors::serialize_to_file(tensors, Some(info), path).map_err(st_err)
}

pub fn load_checkpoint(path: impl AsRef<Path>, dtype: DType) -> Result<(Denoiser, CheckpointManifest)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, meta) = safetensors::SafeTensors::read_metadata(&bytes).map_err(st_err)?;
    let text = meta
        .metadata()
        .as_ref()
        .and_then(|m| m.get(MANIFEST_KEY))
        .ok_or_else(|| Error::Checkpoint("archive has no manifest".into()))?;
    let manifest: CheckpointManifest = serde_json::from_str(text)
        .map_err(|e| Error::Checkpoint(format!("bad manifest: {e}")))?;
    if manifest.schema_version != CHECKPOINT_SCHEMA_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint schema {}",
            manifest.schema_version
        )));
    }
    let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?;
    let params = ParamStore::from_tensors(&manifest.config, tensors, dtype)?;
    let model = Denoiser::from_params(manifest.config.clone(), manifest.root_norm, params)?;
    Ok((model, manifest))
}
