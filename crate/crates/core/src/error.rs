use std::io;

use thiserror::Error;

/// Errors raised by the prompt-tuning core.
#[derive(Debug, Error)]
pub enum CptError {
    #[error("modality `{0}` is already registered")]
    DuplicateModality(String),
    #[error("invalid modality name `{0}`: must be non-empty lowercase ASCII")]
    InvalidModalityName(String),
    #[error("unknown modality {0}")]
    UnknownModality(String),
    #[error("label `{label}` already exists in modality `{modality}`")]
    DuplicateLabel { modality: String, label: String },
    #[error("unknown label `{label}` in modality `{modality}`")]
    UnknownLabel { modality: String, label: String },
    #[error("modality `{0}` has no labels")]
    EmptyBlock(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("row {row} has zero norm")]
    ZeroNorm { row: usize },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("invalid remap table: {0}")]
    InvalidRemap(String),
    #[error("cannot render caption: {0}")]
    Render(String),
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },
    #[error("truncated file: {0}")]
    Truncated(String),
    #[error("malformed file: {0}")]
    Malformed(String),
    #[error("vector for ref_id {ref_id} is not unit norm (norm = {norm})")]
    NormViolation { ref_id: u64, norm: f64 },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("missing metric: {0}")]
    MissingMetric(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = CptError> = std::result::Result<T, E>;
