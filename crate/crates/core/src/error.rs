use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{context}: {axis} mismatch (expected {expected}, found {found})")]
    Shape {
        context: &'static str,
        axis: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("{0}")]
    InvalidInput(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("matrix is not symmetric (max asymmetry {max_asymmetry:e})")]
    NotSymmetric { max_asymmetry: f64 },

    #[error("eigensolver did not converge after {sweeps} sweeps (off-diagonal residual {residual:e})")]
    NoConvergence { sweeps: usize, residual: f64 },

    #[error("training diverged at epoch {epoch} (loss is not finite)")]
    Divergence { epoch: usize },

    #[error("patients missing visits: {}", .patients.join(", "))]
    IncompleteVisits { patients: Vec<String> },

    #[error("R² is undefined: test targets have zero variance")]
    UndefinedR2,

    #[error("config key `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("malformed {what}: {message}")]
    Format { what: String, message: String },

    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("seed {seed}: {source}")]
    Seed {
        seed: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("I/O error at {}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(what: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            what: what.into(),
            message: message.into(),
        }
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// True when the root cause is bad configuration or input validation
    /// rather than a runtime or I/O failure.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Config { .. } => true,
            Error::Stage { source, .. } | Error::Seed { source, .. } => source.is_validation(),
            _ => false,
        }
    }
}

pub(crate) fn check_dim(context: &'static str, axis: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::Shape {
            context,
            axis,
            expected,
            found,
        })
    }
}
