use std::path::PathBuf;

/// Errors surfaced by every module of the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid {field}: {reason}")]
    Validation { field: &'static str, reason: String },

    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("image has zero total mass")]
    ZeroMass,

    #[error("class {0} has no training images")]
    EmptyClass(u8),

    #[error("not enough samples: {0}")]
    InsufficientSamples(String),

    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    #[error("corrupt file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("missing {0}")]
    Missing(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{0}")]
    Rejected(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(field: &'static str, reason: impl Into<String>) -> Self {
        Error::Validation {
            field,
            reason: reason.into(),
        }
    }

    pub(crate) fn shape(context: &'static str, expected: &[usize], got: &[usize]) -> Self {
        Error::ShapeMismatch {
            context,
            expected: expected.to_vec(),
            got: got.to_vec(),
        }
    }

    /// Whether the failure stems from bad input (as opposed to a runtime fault).
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Validation { .. }
                | Error::ShapeMismatch { .. }
                | Error::Config(_)
                | Error::VersionMismatch { .. }
                | Error::Missing(_)
                | Error::EmptyClass(_)
                | Error::InsufficientSamples(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
