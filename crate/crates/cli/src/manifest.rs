// SPDX-License-Identifier: MIT OR Apache-2.0

//! Run manifests: one `manifest.json` next to every command's outputs.

use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use tunedlens::sha256_hex;

use crate::error::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRef {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

impl FileRef {
    #[must_use]
    pub fn of_bytes(path: &Path, bytes: &[u8]) -> Self {
        Self {
            path: path.display().to_string(),
            bytes: bytes.len() as u64,
            sha256: sha256_hex(bytes),
        }
    }

    pub fn of_file(path: &Path) -> Result<Self, CliError> {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        Ok(Self::of_bytes(path, &bytes))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    /// SHA-256 of the canonical JSON of `settings`.
    pub config_digest: String,
    pub settings: serde_json::Value,
    pub config_file: Option<FileRef>,
    pub seed: Option<u64>,
    pub inputs: Vec<FileRef>,
    pub outputs: Vec<FileRef>,
    pub started_at: String,
    pub finished_at: String,
}

/// Collects what a command read and wrote, then writes the manifest.
pub struct ManifestBuilder {
    command: &'static str,
    settings: serde_json::Value,
    config_file: Option<FileRef>,
    seed: Option<u64>,
    inputs: Vec<FileRef>,
    outputs: Vec<PathBuf>,
    started_at: String,
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

impl ManifestBuilder {
    pub fn new(
        command: &'static str,
        settings: &impl Serialize,
        config_file: Option<FileRef>,
        seed: Option<u64>,
    ) -> Self {
        Self {
            command,
            settings: serde_json::to_value(settings).expect("settings serialize"),
            config_file,
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
            started_at: now(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<(), CliError> {
        self.inputs.push(FileRef::of_file(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: PathBuf) {
        self.outputs.push(path);
    }

    /// Hashes every output and writes `dir/manifest.json`.
    pub fn finish(self, dir: &Path) -> Result<RunManifest, CliError> {
        let outputs = self
            .outputs
            .iter()
            .map(|p| FileRef::of_file(p))
            .collect::<Result<Vec<_>, _>>()?;
        let canonical = serde_json::to_vec(&self.settings).expect("value serializes");
        let manifest = RunManifest {
            command: self.command.to_owned(),
            tool_version: env!("CARGO_PKG_VERSION").to_owned(),
            config_digest: sha256_hex(&canonical),
            settings: self.settings,
            config_file: self.config_file,
            seed: self.seed,
            inputs: self.inputs,
            outputs,
            started_at: self.started_at,
            finished_at: now(),
        };
        let path = dir.join(MANIFEST_FILE);
        let mut json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        json.push('\n');
        std::fs::write(&path, json).map_err(|e| CliError::io(&path, e))?;
        Ok(manifest)
    }
}
