use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left} vs {right}")]
    Dimension {
        op: &'static str,
        left: String,
        right: String,
    },

    #[error("degenerate vector in {context}: norm {norm:e} is below the floor")]
    DegenerateVector { context: String, norm: f64 },

    #[error("degenerate rows in {context}: {indices:?}")]
    DegenerateRows { context: String, indices: Vec<usize> },

    #[error("label {label} out of range for {classes} classes (row {row})")]
    LabelOutOfRange {
        row: usize,
        label: usize,
        classes: usize,
    },

    #[error("invalid batch: {0}")]
    InvalidBatch(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value at {path}")]
    NonFinite { path: String },

    #[error("loss term {term} failed: {source}")]
    Term {
        term: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    #[error("OEMB {kind} at byte {offset}: {message}")]
    Format {
        kind: FormatErrorKind,
        offset: u64,
        message: String,
    },

    #[error("empty dictionary")]
    EmptyDictionary,

    #[error("empty corpus: {0}")]
    EmptyCorpus(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

/// Distinguishes the ways an OEMB file can be malformed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FormatErrorKind {
    BadMagic,
    UnsupportedVersion,
    UnknownFlags,
    Truncated,
    NonFinite,
    Overflow,
    TrailingBytes,
    GoldScoreRange,
}

impl std::fmt::Display for FormatErrorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FormatErrorKind::BadMagic => "bad magic",
            FormatErrorKind::UnsupportedVersion => "unsupported version",
            FormatErrorKind::UnknownFlags => "unknown flags",
            FormatErrorKind::Truncated => "truncated file",
            FormatErrorKind::NonFinite => "non-finite entry",
            FormatErrorKind::Overflow => "size overflow",
            FormatErrorKind::TrailingBytes => "trailing bytes",
            FormatErrorKind::GoldScoreRange => "gold score out of range",
        })
    }
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(op: &'static str, left: impl Into<String>, right: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            left: left.into(),
            right: right.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_term(self, term: &'static str) -> Self {
        Error::Term {
            term,
            source: Box::new(self),
        }
    }

    /// True when the error stems from a NaN/Inf somewhere in the numerics.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::NonFinite { .. } => true,
            Error::Term { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}
