//! Run manifests: enough to replay a run and to check that later commands
//! read the artifacts they expect.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub args: Vec<String>,
    /// The config file exactly as read.
    pub config_text: String,
    pub config_sha256: String,
    /// The effective config after command-line overrides.
    pub effective_config: serde_json::Value,
    pub seed: u64,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
    pub timings: serde_json::Value,
    /// Command-specific details, e.g. design columns and area registries.
    pub details: serde_json::Value,
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
    Ok(sha256_bytes(&bytes))
}

pub fn hash_files<'a>(paths: impl IntoIterator<Item = &'a Path>, relative_to: Option<&Path>) -> Result<Vec<FileHash>> {
    paths
        .into_iter()
        .map(|p| {
            let shown = relative_to.and_then(|b| p.strip_prefix(b).ok()).unwrap_or(p);
            Ok(FileHash { path: shown.display().to_string(), sha256: sha256_file(p)? })
        })
        .collect()
}

impl Manifest {
    pub fn new(command: &str, config_text: &str, effective: serde_json::Value, seed: u64) -> Self {
        Manifest {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            args: std::env::args().collect(),
            config_text: config_text.to_string(),
            config_sha256: sha256_bytes(config_text.as_bytes()),
            effective_config: effective,
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
            timings: serde_json::Value::Null,
            details: serde_json::Value::Null,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST);
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text + "\n").with_context(|| format!("cannot write {}", path.display()))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = std::fs::read_to_string(&path).with_context(|| format!("cannot read {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("malformed manifest {}", path.display()))
    }

    /// Re-hashes every recorded output under `dir`.
    pub fn verify_outputs(&self, dir: &Path, which: impl Fn(&str) -> bool) -> Result<()> {
        for f in self.outputs.iter().filter(|f| which(&f.path)) {
            let actual = sha256_file(&dir.join(&f.path))?;
            if actual != f.sha256 {
                bail!("manifest mismatch: {} has changed since the run (sha256 {actual}, recorded {})", f.path, f.sha256);
            }
        }
        Ok(())
    }
}
