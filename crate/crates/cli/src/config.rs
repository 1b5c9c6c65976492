// SPDX-License-Identifier: MIT OR Apache-2.0

//! Optional TOML config file. Precedence is flag > file > default.
//!
//! ```toml
//! [synth]
//! langs = "bn,en,hi"
//! seqs = 300
//!
//! [train]
//! steps = 500
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::CliError;
use crate::manifest::FileRef;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthFile {
    pub d_model: Option<usize>,
    pub layers: Option<usize>,
    pub heads: Option<usize>,
    pub vocab: Option<usize>,
    pub max_seq: Option<usize>,
    pub final_norm: Option<bool>,
    pub langs: Option<String>,
    pub seqs: Option<usize>,
    pub seq_len: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainFile {
    pub steps: Option<usize>,
    pub batch: Option<usize>,
    pub lr: Option<f64>,
    pub seed: Option<u64>,
    pub positions: Option<String>,
    pub per_language: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalFile {
    pub bucket: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeFile {
    pub top_k: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeFile {
    pub port: Option<u16>,
    pub bind: Option<String>,
    pub max_tokens: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub synth: SynthFile,
    pub train: TrainFile,
    pub eval: EvalFile,
    pub probe: ProbeFile,
    pub serve: ServeFile,
}

/// The parsed file plus a reference to it for manifests.
#[derive(Debug, Clone, Default)]
pub struct LoadedConfig {
    pub file: ConfigFile,
    pub source: Option<FileRef>,
}

impl LoadedConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        let text = String::from_utf8(bytes.clone())
            .map_err(|_| CliError::Usage(format!("{}: config is not UTF-8", path.display())))?;
        let file = toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        Ok(Self {
            file,
            source: Some(FileRef::of_bytes(path, &bytes)),
        })
    }
}

/// First present value among flag and file, else the default.
pub fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence_is_flag_then_file_then_default() {
        assert_eq!(pick(Some(1), Some(2), 3), 1);
        assert_eq!(pick(None, Some(2), 3), 2);
        assert_eq!(pick(None, None, 3), 3);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<ConfigFile>("[train]\nstep = 3\n").is_err());
        let ok: ConfigFile = toml::from_str("[train]\nsteps = 3\n").unwrap();
        assert_eq!(ok.train.steps, Some(3));
    }
}
