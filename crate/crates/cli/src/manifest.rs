//! Run manifests: what went in, what came out, and when.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_at, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub command: String,
    /// Resolved configuration (TOML).
    pub config: String,
    pub seed: u64,
    /// Digest over the command, configuration, seed and input files.
    pub input_hash: String,
    pub inputs: BTreeMap<String, String>,
    pub started: String,
    pub finished: String,
    pub metrics: serde_json::Value,
    /// Output file name to SHA-256.
    pub outputs: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_at(path))?;
        serde_json::from_str(&text).map_err(|e| crate::error::invalid(format!("{}: {e}", path.display())))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn hash_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path).map_err(io_at(path))?))
}

/// Write through a sibling temporary file and rename over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let mut f = std::fs::File::create(&tmp).map_err(io_at(&tmp))?;
    f.write_all(bytes).map_err(io_at(&tmp))?;
    f.sync_all().map_err(io_at(&tmp))?;
    std::fs::rename(&tmp, path).map_err(io_at(path))
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

/// Collects a manifest over the lifetime of one command.
pub struct ManifestBuilder {
    command: String,
    config: String,
    seed: u64,
    started: String,
    inputs: BTreeMap<String, String>,
}

impl ManifestBuilder {
    pub fn start(command: &str, config: String, seed: u64) -> Self {
        Self {
            command: command.to_string(),
            config,
            seed,
            started: now(),
            inputs: BTreeMap::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        let hash = hash_file(path)?;
        self.inputs.insert(path.display().to_string(), hash);
        Ok(())
    }

    fn input_hash(&self) -> String {
        let mut h = Sha256::new();
        for part in [self.command.as_str(), self.config.as_str(), &self.seed.to_string()] {
            h.update((part.len() as u64).to_le_bytes());
            h.update(part.as_bytes());
        }
        // Inputs are identified by content, not by where they were read from.
        for digest in self.inputs.values() {
            h.update(digest.as_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Hash `outputs` (paths inside `dir`) and write `dir/manifest.json`.
    pub fn finish(self, dir: &Path, outputs: &[&str], metrics: serde_json::Value) -> Result<RunManifest> {
        let mut hashes = BTreeMap::new();
        for name in outputs {
            hashes.insert(name.to_string(), hash_file(&dir.join(name))?);
        }
        let manifest = RunManifest {
            input_hash: self.input_hash(),
            command: self.command,
            config: self.config,
            seed: self.seed,
            inputs: self.inputs,
            started: self.started,
            finished: now(),
            metrics,
            outputs: hashes,
        };
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        write_atomic(&dir.join(MANIFEST_FILE), text.as_bytes())?;
        Ok(manifest)
    }
}
