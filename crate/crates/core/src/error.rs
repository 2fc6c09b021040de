//! Crate-wide error type.

use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

/// All failure modes of the crate, grouped by what the caller did wrong.
#[derive(Debug)]
pub enum Error {
    /// Incompatible tensor shapes; the message names both shapes.
    Dimension(String),
    /// Invalid argument outside of shape problems (empty list, non-scalar loss, ...).
    Argument(String),
    /// Non-finite values fed to an operation that requires finite input.
    NumericInput(String),
    /// Token id outside the vocabulary.
    Vocabulary(String),
    /// Sequence longer than the configured maximum.
    Length(String),
    /// Inconsistent model or run configuration.
    Configuration(String),
    /// Missing or out-of-range task annotation (spans, markers, heads).
    Annotation(String),
    /// Loss is undefined for the given batch (e.g. every row ignored).
    UndefinedLoss(String),
    /// Malformed cloze query.
    Query(String),
    /// Metric undefined for the given inputs.
    Metric(String),
    /// Corpus file failed validation; carries the offending line when known.
    Validation { line: Option<usize>, message: String },
    /// Checkpoint file does not conform to the format.
    Format(FormatError),
    Io(std::io::Error),
    Json(serde_json::Error),
}

/// Checkpoint format violations, each distinct so tests can tell them apart.
#[derive(Debug, PartialEq, Eq)]
pub enum FormatError {
    BadMagic([u8; 4]),
    UnsupportedVersion(u32),
    Truncated { expected: usize, got: usize },
    OverlappingEntries { name: String },
    EntryOutOfBounds { name: String },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension(m) => write!(f, "dimension error: {m}"),
            Error::Argument(m) => write!(f, "argument error: {m}"),
            Error::NumericInput(m) => write!(f, "numeric input error: {m}"),
            Error::Vocabulary(m) => write!(f, "vocabulary error: {m}"),
            Error::Length(m) => write!(f, "length error: {m}"),
            Error::Configuration(m) => write!(f, "configuration error: {m}"),
            Error::Annotation(m) => write!(f, "annotation error: {m}"),
            Error::UndefinedLoss(m) => write!(f, "undefined loss: {m}"),
            Error::Query(m) => write!(f, "query error: {m}"),
            Error::Metric(m) => write!(f, "metric error: {m}"),
            Error::Validation { line: Some(n), message } => {
                write!(f, "validation error at line {n}: {message}")
            }
            Error::Validation { line: None, message } => {
                write!(f, "validation error: {message}")
            }
            Error::Format(e) => write!(f, "checkpoint format error: {e}"),
            Error::Io(e) => write!(f, "i/o error: {e}"),
            Error::Json(e) => write!(f, "json error: {e}"),
        }
    }
}

impl fmt::Display for FormatError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FormatError::BadMagic(m) => write!(f, "bad magic {m:?}, expected \"KADP\""),
            FormatError::UnsupportedVersion(v) => write!(f, "unsupported version {v}"),
            FormatError::Truncated { expected, got } => {
                write!(f, "truncated file: expected {expected} bytes, got {got}")
            }
            FormatError::OverlappingEntries { name } => {
                write!(f, "entry {name:?} overlaps a previous entry")
            }
            FormatError::EntryOutOfBounds { name } => {
                write!(f, "entry {name:?} points outside the payload")
            }
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

impl Error {
    /// True when the error is the caller's fault (invalid input or config),
    /// which the CLI maps to exit code 2 rather than 1.
    pub fn is_invalid_input(&self) -> bool {
        !matches!(self, Error::Io(_) | Error::UndefinedLoss(_))
    }
}
