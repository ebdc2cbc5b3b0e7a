// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module of the crate.

use std::path::PathBuf;

/// Errors produced by trace I/O, probe training, metrics, and decoding.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Filesystem failure, annotated with the offending path when known.
    #[error("I/O error at {path}: {source}")]
    Io {
        /// Path being read or written.
        path: PathBuf,
        /// Underlying error.
        #[source]
        source: std::io::Error,
    },

    /// JSON (de)serialization failure.
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    /// Binary container has the wrong magic bytes.
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic {
        /// Expected four-byte tag.
        expected: String,
        /// Tag found in the file.
        found: String,
    },

    /// Container version is not supported.
    #[error("unsupported version {0} (expected 1)")]
    Version(u32),

    /// Declared dimensions disagree between two sources.
    #[error("dim mismatch: {0}")]
    DimMismatch(String),

    /// Tensor or buffer has an unexpected shape or length.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Probe file declares an architecture code this build does not know.
    #[error("unknown arch code {0}")]
    UnknownArch(u32),

    /// Trace failed validation; each entry names a field and the rule it breaks.
    #[error("invalid trace: {}", .0.join("; "))]
    InvalidTrace(Vec<String>),

    /// Two spans cover a common token.
    #[error("spans {first} and {second} overlap")]
    SpanOverlap {
        /// Index of the first span (input order).
        first: usize,
        /// Index of the second span (input order).
        second: usize,
    },

    /// Configuration violates an invariant.
    #[error("invalid config: {0}")]
    Config(String),

    /// Argument outside the operation's domain.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Binary metric requires both classes.
    #[error("single-class: {0}")]
    SingleClass(String),

    /// A token selection matched nothing.
    #[error("no tokens in set: {0}")]
    EmptySet(String),

    /// Steering direction collapsed to zero.
    #[error("zero steering vector: target and reference means coincide")]
    ZeroVector,

    /// The generative model failed at a given decoding step.
    #[error("model fault at step {step}: {message}")]
    Model {
        /// Zero-based decoding step.
        step: usize,
        /// Description from the model.
        message: String,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
