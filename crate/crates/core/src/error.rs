use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Mc3Error>;

#[derive(Debug, Error)]
pub enum Mc3Error {
    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("non-finite gradient")]
    NonFiniteGradient,

    #[error("degenerate norm {0:e}: vector collapsed to zero")]
    DegenerateNorm(f64),

    #[error("invalid dimensions: {0}")]
    InvalidDims(String),

    #[error("value {value} outside [{lo}, {hi}]")]
    OutOfRange { value: f64, lo: f64, hi: f64 },

    #[error("invalid config: {key}: {reason}")]
    InvalidConfig { key: String, reason: String },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("record {record}: {modality} row {row} missing from bank {bank} ({count} rows)")]
    DanglingReference {
        record: String,
        modality: String,
        bank: String,
        row: usize,
        count: usize,
    },

    #[error("{path}: bad magic {found:?}")]
    BadMagic { path: PathBuf, found: [u8; 4] },

    #[error("version mismatch: {0}")]
    VersionMismatch(String),

    #[error("{path}: truncated file ({reason})")]
    TruncatedFile { path: PathBuf, reason: String },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("record {0} has no sounding label")]
    MissingLabel(String),

    #[error("degenerate labels: {0}")]
    DegenerateLabels(String),

    #[error("no action group qualifies for retrieval pools")]
    EmptyPools,

    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },

    #[error("step {step}: {source}")]
    AtStep {
        step: u64,
        #[source]
        source: Box<Mc3Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Mc3Error {
    pub fn shape(expected: impl ToString, actual: impl ToString) -> Self {
        Mc3Error::ShapeMismatch {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Mc3Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(key: impl ToString, reason: impl ToString) -> Self {
        Mc3Error::InvalidConfig {
            key: key.to_string(),
            reason: reason.to_string(),
        }
    }

    /// Strips `AtStep` wrappers.
    pub fn root(&self) -> &Mc3Error {
        match self {
            Mc3Error::AtStep { source, .. } => source.root(),
            other => other,
        }
    }
}
