use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the vtt toolkit.
#[derive(Debug, Error)]
pub enum VttError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: parse error: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    /// A domain object broke one of its invariants.
    #[error("invalid {what} `{id}`: {reason}")]
    Invalid {
        what: &'static str,
        id: String,
        reason: String,
    },

    #[error("embedding store: {0}")]
    Store(String),

    #[error("missing embedding for state `{0}`")]
    MissingEmbedding(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("predictions do not cover the evaluated split; missing: {}", .missing.join(", "))]
    Coverage { missing: Vec<String> },

    #[error("non-finite {what} at step {step}")]
    NonFinite { what: &'static str, step: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl VttError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        VttError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(what: &'static str, id: impl Into<String>, reason: impl Into<String>) -> Self {
        VttError::Invalid {
            what,
            id: id.into(),
            reason: reason.into(),
        }
    }

    /// True for errors caused by malformed input data rather than the
    /// environment. The CLI maps these to exit code 2.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            VttError::Parse { .. }
                | VttError::Invalid { .. }
                | VttError::Store(_)
                | VttError::MissingEmbedding(_)
                | VttError::Coverage { .. }
                | VttError::Config(_)
        )
    }

    /// Short machine-readable tag for the error kind.
    pub fn kind(&self) -> &'static str {
        match self {
            VttError::Io { .. } => "io",
            VttError::Parse { .. } => "parse",
            VttError::Invalid { .. } => "invalid",
            VttError::Store(_) => "store",
            VttError::MissingEmbedding(_) => "missing_embedding",
            VttError::Shape(_) => "shape",
            VttError::Config(_) => "config",
            VttError::Coverage { .. } => "coverage",
            VttError::NonFinite { .. } => "non_finite",
            VttError::Checkpoint(_) => "checkpoint",
        }
    }
}

pub type Result<T, E = VttError> = std::result::Result<T, E>;
