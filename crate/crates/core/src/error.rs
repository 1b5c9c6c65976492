// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module of the crate.

use std::path::PathBuf;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, LensError>;

/// Everything that can go wrong while capturing, training, or evaluating lenses.
#[non_exhaustive]
#[derive(Debug, thiserror::Error)]
pub enum LensError {
    /// Two operands disagree on a dimension.
    #[error("dimension mismatch in {what}: expected {expected}, got {actual}")]
    Dimension {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    /// A NaN or infinity was found where finite values are required.
    #[error("non-finite value in {what} at index {index}")]
    NonFinite { what: &'static str, index: usize },

    /// A probability vector violates the distribution invariants.
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    /// The input is empty where at least one element is required.
    #[error("empty input: {0}")]
    Empty(&'static str),

    /// A model specification violates its invariants.
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),

    /// A token id lies outside the vocabulary.
    #[error("token id {id} at position {position} is out of range for vocabulary of size {vocab_size}")]
    TokenOutOfRange {
        position: usize,
        id: u32,
        vocab_size: usize,
    },

    /// A sequence exceeds the model's maximum length.
    #[error("sequence length {len} exceeds max_seq {max_seq}")]
    SequenceTooLong { len: usize, max_seq: usize },

    /// Input that makes the computation undefined (e.g. a zero vector under RMS normalization).
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// Lens, model, or activation set were built for different model specs.
    #[error("spec mismatch: {0}")]
    SpecMismatch(String),

    /// A tuned lens is missing the translator for an intermediate layer.
    #[error("lens has no translator for layer {0}")]
    MissingTranslator(usize),

    /// A layer index is outside `1..=n_layers`.
    #[error("layer {layer} out of range 1..={n_layers}")]
    LayerOutOfRange { layer: usize, n_layers: usize },

    /// A configuration value violates its invariants.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// Training produced a non-finite loss or gradient.
    #[error("training diverged at layer {layer}, step {step}: {detail}")]
    Divergence { layer: usize, step: usize, detail: String },

    /// Gold-mode metrics were requested for a sample without gold fields.
    #[error("sample {sample} lacks gold_token_index/answer_position required in gold mode")]
    MissingGold { sample: usize },

    /// Two metric grids cannot be combined.
    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    /// A file header could not be parsed.
    #[error("corrupt header in {path}: {detail}")]
    Header { path: PathBuf, detail: String },

    /// A file ended before its declared payload.
    #[error("truncated payload in {path}: expected {expected} bytes, found {actual}")]
    Truncated { path: PathBuf, expected: u64, actual: u64 },

    /// A file was written by an unsupported format version.
    #[error("unsupported format version {found} in {path} (this build reads version {supported})")]
    VersionMismatch { path: PathBuf, found: u32, supported: u32 },

    /// A payload failed its checksum.
    #[error("corrupt payload in {path}: {detail}")]
    Corrupt { path: PathBuf, detail: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl LensError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}
