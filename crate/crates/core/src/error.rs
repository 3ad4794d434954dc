use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic in {path}: expected {expected:?}, found {found:?}")]
    BadMagic {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("version mismatch in {path}: expected {expected}, found {found}")]
    VersionMismatch {
        path: PathBuf,
        expected: u32,
        found: u32,
    },

    #[error("truncated file {path}: expected {expected} bytes, found {actual}")]
    Truncated {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },

    #[error("manifest line {line}: {message}")]
    Schema { line: usize, message: String },

    #[error("manifest line {line}: missing feature file {path}")]
    MissingFeatureFile { line: usize, path: PathBuf },

    #[error("manifest line {line}: duplicate slide_id {slide_id:?}")]
    DuplicateId { line: usize, slide_id: String },

    /// A metric or statistic has no defined value for this input.
    #[error("undefined: {0}")]
    Undefined(String),

    /// The requested experimental design cannot be realised by the data.
    #[error("unsatisfiable design: {0}")]
    Unsatisfiable(String),

    #[error("did not converge: {0}")]
    NonConvergence(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonConvergence(_) | Error::NonFinite(_) => 3,
            Error::Unsatisfiable(_) => 4,
            _ => 2,
        }
    }
}
