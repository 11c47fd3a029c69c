//! Parameter checkpoints: a JSON manifest plus one tensor file per parameter.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::EncoderConfig;
use crate::decoders::HeadConfig;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::pipeline::Policy;
use crate::tensor_io;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: String,
    pub encoder: EncoderConfig,
    pub head: HeadConfig,
    pub tensors: Vec<TensorEntry>,
}

pub fn save_store(dir: &Path, store: &ParamStore<f64>) -> Result<Vec<TensorEntry>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    store
        .iter()
        .map(|p| {
            let file = format!("{}.a3rt", p.name);
            tensor_io::save(&dir.join(&file), &p.value)?;
            Ok(TensorEntry {
                name: p.name.clone(),
                file,
                shape: p.value.shape().to_vec(),
                trainable: p.trainable,
            })
        })
        .collect()
}

/// Overwrites values in `store` from tensor files; every parameter must be
/// present with a matching shape.
pub fn load_store(dir: &Path, entries: &[TensorEntry], store: &mut ParamStore<f64>) -> Result<()> {
    if entries.len() != store.len() {
        return Err(Error::dims("checkpoint tensor count", store.len(), entries.len()));
    }
    for e in entries {
        let id = store.id(&e.name).ok_or_else(|| Error::Unknown {
            kind: "parameter",
            name: e.name.clone(),
        })?;
        let path = dir.join(&e.file);
        let bytes = fs::read(&path).map_err(|err| Error::io(&path, err))?;
        let value = tensor_io::decode::<f64>(&bytes)?;
        let param = store.param_mut(id);
        if value.shape() != param.value.shape() {
            return Err(Error::dims(
                "checkpoint tensor shape",
                format!("{:?}", param.value.shape()),
                format!("{:?}", value.shape()),
            ));
        }
        param.value = value;
        param.trainable = e.trainable;
    }
    Ok(())
}

pub fn save_policy(dir: &Path, policy: &Policy) -> Result<()> {
    let tensors = save_store(dir, &policy.store)?;
    let manifest = CheckpointManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        encoder: policy.encoder,
        head: policy.head_cfg,
        tensors,
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load_policy(dir: &Path) -> Result<Policy> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    let mut policy = Policy::new(manifest.encoder, manifest.head)?;
    load_store(dir, &manifest.tensors, &mut policy.store)?;
    Ok(policy)
}
