// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::PathBuf;

use tunedlens::LensError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags or flag combinations; exit status 2.
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Lens(#[from] LensError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {detail}")]
    Input { path: PathBuf, detail: String },
    #[error("server: {0}")]
    Server(String),
}

impl CliError {
    #[must_use]
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Usage(_) => 2,
            _ => 1,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// Reclassifies configuration errors from the library as usage errors.
    pub(crate) fn usage_if_config(e: LensError) -> Self {
        match e {
            LensError::InvalidConfig(m) => Self::Usage(m),
            LensError::InvalidSpec(m) => Self::Usage(m),
            LensError::SequenceTooLong { .. } => Self::Usage(e.to_string()),
            other => Self::Lens(other),
        }
    }
}
