//! Run manifest: a JSON record of what a command did, written next to the
//! command's outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Serialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub command: String,
    pub config_hash: String,
    pub seed: Option<u64>,
    pub code_version: String,
    pub started_at: String,
    pub finished_at: String,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub notes: BTreeMap<String, String>,
}

pub struct ManifestBuilder {
    command: String,
    config_hash: String,
    seed: Option<u64>,
    started_at: String,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    notes: BTreeMap<String, String>,
}

impl ManifestBuilder {
    pub fn new(command: &str) -> Self {
        ManifestBuilder {
            command: command.to_string(),
            config_hash: String::new(),
            seed: None,
            started_at: chrono::Utc::now().to_rfc3339(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            notes: BTreeMap::new(),
        }
    }

    /// Hash of whatever configures the run (config file bytes or the
    /// flag string for config-free commands).
    pub fn config(mut self, bytes: &[u8]) -> Self {
        self.config_hash = format!("{:x}", Sha256::digest(bytes));
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn input(mut self, p: &Path) -> Self {
        self.inputs.push(p.to_path_buf());
        self
    }

    pub fn output(mut self, p: &Path) -> Self {
        self.outputs.push(p.to_path_buf());
        self
    }

    pub fn note(mut self, key: &str, value: impl Into<String>) -> Self {
        self.notes.insert(key.to_string(), value.into());
        self
    }

    pub fn write(self, path: &Path) -> anyhow::Result<()> {
        let manifest = RunManifest {
            schema_version: 1,
            command: self.command,
            config_hash: self.config_hash,
            seed: self.seed,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            started_at: self.started_at,
            finished_at: chrono::Utc::now().to_rfc3339(),
            inputs: self.inputs,
            outputs: self.outputs,
            notes: self.notes,
        };
        std::fs::write(path, serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }
}

/// `foo.png` -> `foo.manifest.json`
pub fn sibling_manifest(out: &Path) -> PathBuf {
    out.with_extension("manifest.json")
}
