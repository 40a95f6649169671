use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
///
/// Every variant maps to a stable numeric code (see [`Error::code`]) so that
/// bindings in other languages can branch on the failure kind.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("bad magic in {path}: expected {expected:?}, found {found:?}")]
    BadMagic {
        path: PathBuf,
        expected: [u8; 4],
        found: [u8; 4],
    },

    #[error("truncated payload in {path}: expected {expected} bytes, found {found}")]
    Truncated { path: PathBuf, expected: u64, found: u64 },

    #[error("trailing bytes in {path}: expected {expected} bytes, found {found}")]
    TrailingBytes { path: PathBuf, expected: u64, found: u64 },

    #[error("dimension mismatch between paired inputs: {0}")]
    PairMismatch(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("parameter {0} has no gradient")]
    MissingGradient(usize),

    #[error("missing artifact {path}: run {command} first")]
    MissingArtifact { path: PathBuf, command: &'static str },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable numeric code for this error kind, starting at 1.
    pub fn code(&self) -> i32 {
        match self {
            Error::Dimension { .. } => 1,
            Error::Parameter(_) => 2,
            Error::BadMagic { .. } => 3,
            Error::Truncated { .. } => 4,
            Error::TrailingBytes { .. } => 5,
            Error::PairMismatch(_) => 6,
            Error::Validation(_) => 7,
            Error::NonScalarLoss(_) => 8,
            Error::MissingGradient(_) => 9,
            Error::MissingArtifact { .. } => 10,
            Error::Config(_) => 11,
            Error::Io(_) => 12,
        }
    }

    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
