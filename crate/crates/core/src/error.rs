// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every analysis module.

use std::path::PathBuf;

/// Errors produced by the engine.
#[derive(Debug, thiserror::Error)]
pub enum XlgError {
    /// I/O failure, always carrying the path involved.
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed JSON document (manifest, spec, report, record).
    #[error("parse error in {origin} at line {line}, column {column}: {message}")]
    Parse {
        origin: String,
        line: usize,
        column: usize,
        message: String,
    },

    /// A structurally valid document that breaks a domain invariant.
    #[error("validation error: {0}")]
    Validation(String),

    /// Bad magic, unsupported version or inconsistent binary header.
    #[error("format error: {0}")]
    Format(String),

    /// Payload shorter (or longer) than the header declares.
    #[error("length error: expected {expected} payload bytes, found {found}")]
    Length { expected: u64, found: u64 },

    /// Non-finite value in an activation payload.
    #[error("data error: non-finite value {value} at row {row}, neuron {neuron}")]
    NonFinite { row: usize, neuron: usize, value: f32 },

    /// Non-finite score handed to a metric.
    #[error("data error: non-finite score at position {0}")]
    NonFiniteScore(usize),

    /// Metric undefined for the given input (single class, constant vector).
    #[error("undefined metric: {0}")]
    Undefined(String),

    /// Index or count outside the permitted range.
    #[error("range error: {0}")]
    Range(String),

    /// Invalid argument to an operation.
    #[error("argument error: {0}")]
    Argument(String),

    /// A required (concept, language) or (layer, language) cell is missing.
    #[error("completeness error: missing {0}")]
    Missing(String),

    /// Error raised while scoring a specific neuron column.
    #[error("neuron {neuron}: {source}")]
    AtNeuron {
        neuron: usize,
        #[source]
        source: Box<XlgError>,
    },
}

pub type Result<T> = std::result::Result<T, XlgError>;

impl XlgError {
    /// Short machine-readable class of the error.
    pub fn category(&self) -> &'static str {
        match self {
            XlgError::Io { .. } => "io",
            XlgError::Parse { .. } => "parse",
            XlgError::Validation(_) => "validation",
            XlgError::Format(_) => "format",
            XlgError::Length { .. } => "length",
            XlgError::NonFinite { .. } | XlgError::NonFiniteScore(_) => "data",
            XlgError::Undefined(_) => "undefined",
            XlgError::Range(_) => "range",
            XlgError::Argument(_) => "argument",
            XlgError::Missing(_) => "missing",
            XlgError::AtNeuron { source, .. } => source.category(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        XlgError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(origin: impl Into<String>, err: &serde_json::Error) -> Self {
        XlgError::Parse {
            origin: origin.into(),
            line: err.line(),
            column: err.column(),
            message: err.to_string(),
        }
    }
}
