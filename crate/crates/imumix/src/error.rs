//! Crate-wide error type.

use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug)]
pub enum Error {
    /// Incompatible tensor shapes for an operation; the message names both shapes.
    Shape { op: &'static str, detail: String },
    /// Class label outside `[0, num_classes)`.
    Label {
        index: usize,
        label: usize,
        num_classes: usize,
    },
    /// NaN or infinity where a finite value is required.
    NonFinite { context: String },
    /// A gradient tape was used after its backward pass.
    TapeSpent,
    /// Invalid model/run configuration.
    Config(String),
    /// Checkpoint file does not start with the expected magic bytes.
    CheckpointMagic,
    /// Checkpoint format version is not supported.
    CheckpointVersion { found: u32, expected: u32 },
    /// Checkpoint file ended mid-record.
    CheckpointTruncated { what: &'static str },
    /// Checkpoint parameter block disagrees with its config header.
    CheckpointParamMismatch { what: String },
    /// Malformed data record; `line` is 1-based within the input file.
    Data { line: usize, message: String },
    /// Fold construction or protocol-level failure.
    Protocol(String),
    /// Out-of-order timestamp in a streamed trace.
    StreamOrder { previous: f64, current: f64 },
    Io(std::io::Error),
    Json(serde_json::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, detail } => write!(f, "shape error in {op}: {detail}"),
            Error::Label {
                index,
                label,
                num_classes,
            } => write!(
                f,
                "label {label} at batch index {index} is outside [0, {num_classes})"
            ),
            Error::NonFinite { context } => write!(f, "non-finite value: {context}"),
            Error::TapeSpent => write!(f, "gradient tape already consumed by a backward pass"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::CheckpointMagic => write!(f, "checkpoint error: bad magic bytes"),
            Error::CheckpointVersion { found, expected } => write!(
                f,
                "checkpoint error: format version {found}, expected {expected}"
            ),
            Error::CheckpointTruncated { what } => {
                write!(f, "checkpoint error: file truncated while reading {what}")
            }
            Error::CheckpointParamMismatch { what } => {
                write!(f, "checkpoint error: parameter block mismatch: {what}")
            }
            Error::Data { line, message } => write!(f, "data error at line {line}: {message}"),
            Error::Protocol(msg) => write!(f, "protocol error: {msg}"),
            Error::StreamOrder { previous, current } => write!(
                f,
                "non-monotone trace timestamps: {current} after {previous}"
            ),
            Error::Io(e) => write!(f, "io error: {e}"),
            Error::Json(e) => write!(f, "json error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            Error::Json(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e)
    }
}
