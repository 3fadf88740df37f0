use std::io;

use thiserror::Error;

/// Errors produced anywhere in the simulator.
///
/// Every variant maps to a stable kebab-case [`Error::kind`] string, which the
/// CLI prints as part of its machine-readable failure line.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("component `{0}` has zero power and cannot be scaled")]
    SilentComponent(&'static str),
    #[error("band [{f_low_hz}, {f_high_hz}] Hz lies outside the representable spectrum")]
    EmptyBand { f_low_hz: f64, f_high_hz: f64 },
    #[error("input has {len} samples, need at least {needed}")]
    TooShortInput { len: usize, needed: usize },
    #[error("value out of range: {0}")]
    OutOfRange(String),
    #[error("degenerate dataset: {0}")]
    DegenerateDataset(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("frequency extent [{0}, {1}] Hz is empty")]
    EmptyExtent(f64, f64),
    #[error("protocol violation: {0}")]
    ProtocolViolation(String),
    #[error("no trained detector model available")]
    MissingModel,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("missing data: {0}")]
    MissingData(String),
    #[error("malformed file {path}: {reason}")]
    Format { path: String, reason: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidParams(_) => "invalid-params",
            Error::SilentComponent(_) => "silent-component",
            Error::EmptyBand { .. } => "empty-band",
            Error::TooShortInput { .. } => "too-short-input",
            Error::OutOfRange(_) => "out-of-range",
            Error::DegenerateDataset(_) => "degenerate-dataset",
            Error::DimensionMismatch { .. } => "dimension-mismatch",
            Error::EmptyExtent(..) => "empty-extent",
            Error::ProtocolViolation(_) => "protocol-violation",
            Error::MissingModel => "missing-model",
            Error::InvalidConfig(_) => "invalid-config",
            Error::MissingData(_) => "missing-data",
            Error::Format { .. } => "format",
            Error::Io(_) => "io-failure",
        }
    }

    pub(crate) fn format(path: impl AsRef<std::path::Path>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.as_ref().display().to_string(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
