use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = VbillError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum VbillError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("index {index} out of range for {n} observations")]
    IndexOutOfRange { index: usize, n: usize },

    #[error("{0} is not available in closed form for this model")]
    Intractable(&'static str),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("ill-conditioned Fisher information (c2 = {c2:e}) at lambda {snapshot}")]
    Conditioning { c2: f64, snapshot: String },

    #[error("Newton iterations did not converge after {iterations} steps (last iterate {last:?})")]
    NonConvergence { iterations: usize, last: Vec<f64> },

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("all importance weights underflowed for panel {panel}")]
    DegenerateWeights { panel: usize },

    #[error("dataset fingerprint mismatch: expected {expected:016x}, found {found:016x}")]
    FingerprintMismatch { expected: u64, found: u64 },

    #[error("schema violation: {0}")]
    Schema(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("CSV error on {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("empty input: {0}")]
    Empty(&'static str),
}

impl VbillError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        VbillError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn non_finite(context: impl Into<String>) -> Self {
        VbillError::NonFinite {
            context: context.into(),
        }
    }

    /// Coarse category used for CLI exit lines.
    pub fn category(&self) -> &'static str {
        match self {
            VbillError::Io { .. } | VbillError::Csv { .. } => "io",
            VbillError::Schema(_) | VbillError::FingerprintMismatch { .. } | VbillError::Empty(_) => {
                "data"
            }
            VbillError::DimensionMismatch { .. }
            | VbillError::IndexOutOfRange { .. }
            | VbillError::InvalidParameter(_)
            | VbillError::Intractable(_) => "usage",
            VbillError::NonFinite { .. }
            | VbillError::Conditioning { .. }
            | VbillError::NonConvergence { .. }
            | VbillError::NotPositiveDefinite(_)
            | VbillError::DegenerateWeights { .. } => "numeric",
        }
    }
}

pub(crate) fn check_dim(expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(VbillError::DimensionMismatch { expected, found });
    }
    Ok(())
}
