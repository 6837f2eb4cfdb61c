use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Broad failure class, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("treatment entry {value} at row {row} is outside the coding set")]
    InvalidTreatment { row: usize, value: String },

    #[error("single-arm data: both treatment arms must be present")]
    SingleArm,

    #[error("non-finite value in {matrix} at row {row}, column {col}")]
    NonFinite {
        matrix: &'static str,
        row: usize,
        col: usize,
    },

    #[error("positivity violated: propensity {value} at row {row} is not in (0, 1)")]
    Positivity { row: usize, value: f64 },

    #[error("rank {rank} exceeds min(p+1, q) = {max}")]
    RankTooLarge { rank: usize, max: usize },

    #[error("V is not column-orthonormal (max deviation {deviation:e})")]
    NonOrthonormal { deviation: f64 },

    #[error("non-finite objective at outer iteration {iteration}")]
    NonFiniteObjective { iteration: usize },

    #[error("{solver} did not converge after {iterations} iterations (last value {last})")]
    NotConverged {
        solver: &'static str,
        iterations: usize,
        last: f64,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("unsupported scenario: {0}")]
    Scenario(String),

    #[error("{path}: row {row}, column {column}: {message}")]
    Parse {
        path: PathBuf,
        row: usize,
        column: String,
        message: String,
    },

    #[error("{path}: missing column {column}")]
    MissingColumn { path: PathBuf, column: String },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("cross-validation failed at lambda={lambda}, phi={phi}, rank={rank}, fold={fold}: {source}")]
    CrossValidation {
        lambda: f64,
        phi: f64,
        rank: usize,
        fold: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::InvalidConfig(_) | Error::RankTooLarge { .. } | Error::Scenario(_) => {
                ErrorKind::Usage
            }
            Error::NonOrthonormal { .. }
            | Error::NonFiniteObjective { .. }
            | Error::NotConverged { .. } => ErrorKind::Numerical,
            Error::CrossValidation { source, .. } => source.kind(),
            _ => ErrorKind::Data,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
