use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use a3r_core::pipeline::StageTimings;
use a3r_core::{Error, Result};
use serde::Serialize;
use serde_json::Value;

pub const RUN_MANIFEST: &str = "run_manifest.json";

/// Record of one command invocation: enough to rerun it and to find what it
/// wrote.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config: BTreeMap<String, Value>,
    pub inputs: BTreeMap<String, PathBuf>,
    pub outputs: BTreeMap<String, PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timings_us: Option<StageTimings>,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: BTreeMap::new(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            timings_us: None,
        }
    }

    pub fn config(&mut self, key: &str, value: impl Serialize) -> &mut Self {
        self.config
            .insert(key.to_string(), serde_json::to_value(value).expect("config serializes"));
        self
    }

    pub fn input(&mut self, key: &str, path: &Path) -> &mut Self {
        self.inputs.insert(key.to_string(), path.to_path_buf());
        self
    }

    pub fn output(&mut self, key: &str, path: &Path) -> &mut Self {
        self.outputs.insert(key.to_string(), path.to_path_buf());
        self
    }

    /// Writes the manifest to `path` after checking every listed output
    /// exists.
    pub fn write(&self, path: &Path) -> Result<()> {
        for p in self.outputs.values() {
            if !p.exists() {
                return Err(Error::io(
                    p,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "declared output missing"),
                ));
            }
        }
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}
