//! Checkpoint files: `meta.json` (config, tokenizer, provenance) next to
//! `params.bin`, the parameter vector as little-endian `f32` in
//! [`ParamLayout`](super::ParamLayout) order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LmConfig, LmModel, Tokenizer};
use crate::error::{Error, Result};

pub const CHECKPOINT_SCHEMA: u32 = 1;
pub const META_FILE: &str = "meta.json";
pub const PARAMS_FILE: &str = "params.bin";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub schema_version: u32,
    pub config: LmConfig,
    pub tokenizer: Tokenizer,
    pub init_seed: u64,
    pub epoch: usize,
    /// Training configuration mirrored from the run that produced this file.
    #[serde(default)]
    pub train_config: serde_json::Value,
    pub layout: Vec<TensorEntry>,
    pub dtype: String,
}

pub fn save(
    dir: &Path,
    model: &LmModel,
    tokenizer: &Tokenizer,
    init_seed: u64,
    epoch: usize,
    train_config: serde_json::Value,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let layout = model
        .layout()
        .tensors()
        .iter()
        .map(|(name, r, shape)| TensorEntry {
            name: name.clone(),
            offset: r.start,
            shape: shape.clone(),
        })
        .collect();
    let meta = CheckpointMeta {
        schema_version: CHECKPOINT_SCHEMA,
        config: *model.config(),
        tokenizer: tokenizer.clone(),
        init_seed,
        epoch,
        train_config,
        layout,
        dtype: "f32le".into(),
    };
    let meta_path = dir.join(META_FILE);
    fs::write(&meta_path, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(&meta_path, e))?;
    let mut blob = Vec::with_capacity(model.parameter_count() * 4);
    for &p in model.params() {
        blob.extend_from_slice(&(p as f32).to_le_bytes());
    }
    let params_path = dir.join(PARAMS_FILE);
    fs::write(&params_path, blob).map_err(|e| Error::io(&params_path, e))?;
    Ok(())
}

pub fn load(dir: &Path) -> Result<(LmModel, Tokenizer, CheckpointMeta)> {
    let meta_path = dir.join(META_FILE);
    let raw = fs::read(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: CheckpointMeta = serde_json::from_slice(&raw)?;
    if meta.schema_version != CHECKPOINT_SCHEMA {
        return Err(Error::Schema {
            what: meta_path.display().to_string(),
            expected: CHECKPOINT_SCHEMA,
            found: meta.schema_version,
        });
    }
    if meta.tokenizer.vocab_size() != meta.config.vocab_size {
        return Err(Error::Argument(format!(
            "tokenizer has {} entries but config says {}",
            meta.tokenizer.vocab_size(),
            meta.config.vocab_size
        )));
    }
    let params_path = dir.join(PARAMS_FILE);
    let blob = fs::read(&params_path).map_err(|e| Error::io(&params_path, e))?;
    if blob.len() % 4 != 0 {
        return Err(Error::Argument(format!("{}: truncated blob", params_path.display())));
    }
    let params = blob
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    let model = LmModel::from_params(meta.config, params)?;
    Ok((model, meta.tokenizer.clone(), meta))
}
