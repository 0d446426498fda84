// SPDX-License-Identifier: MIT OR Apache-2.0

//! Content-addressed output directories with a manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::CliError;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_hash(flag: &str, path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path)
        .map_err(|e| CliError::usage(format!("{flag} {}: {e}", path.display())))?;
    Ok(sha256_hex(&bytes))
}

/// `<base>/<command>-<hash>/`, where the hash covers the command and its
/// full configuration (including input file hashes).
pub struct RunDir {
    path: PathBuf,
    command: String,
    config: Value,
    artifacts: BTreeMap<String, String>,
}

impl RunDir {
    pub fn create(base: &Path, command: &str, config: Value, force: bool) -> Result<Self, CliError> {
        let canonical = serde_json::to_vec(&json!({ "command": command, "config": config }))
            .map_err(|e| CliError::runtime(e.to_string()))?;
        let hash = sha256_hex(&canonical);
        let path = base.join(format!("{command}-{}", &hash[..12]));
        if path.exists() {
            if !force {
                return Err(CliError::usage(format!(
                    "{} already exists; pass --force to overwrite",
                    path.display()
                )));
            }
            fs::remove_dir_all(&path).map_err(|e| CliError::io(&path, e))?;
        }
        fs::create_dir_all(&path).map_err(|e| CliError::io(&path, e))?;
        Ok(Self {
            path,
            command: command.to_string(),
            config,
            artifacts: BTreeMap::new(),
        })
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<(), CliError> {
        let target = self.path.join(rel);
        if let Some(parent) = target.parent() {
            fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        fs::write(&target, bytes).map_err(|e| CliError::io(&target, e))?;
        self.artifacts.insert(rel.to_string(), sha256_hex(bytes));
        Ok(())
    }

    pub fn write_json<T: serde::Serialize>(&mut self, rel: &str, value: &T) -> Result<(), CliError> {
        let mut text =
            serde_json::to_string_pretty(value).map_err(|e| CliError::runtime(e.to_string()))?;
        text.push('\n');
        self.write(rel, text.as_bytes())
    }

    /// Writes `manifest.json` and returns the run directory.
    pub fn finish(mut self) -> Result<PathBuf, CliError> {
        let manifest = json!({
            "command": self.command,
            "config": self.config,
            "artifacts": self.artifacts,
        });
        let artifacts = std::mem::take(&mut self.artifacts);
        self.write_json("manifest.json", &manifest)?;
        self.artifacts = artifacts;
        Ok(self.path)
    }
}
