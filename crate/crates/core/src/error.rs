use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Usage(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    #[error("unsupported depth {depth}: {detail}")]
    UnsupportedDepth { depth: usize, detail: String },

    #[error("no convergence after {steps} steps (gradient norm {grad_norm:e})")]
    NonConvergence {
        steps: usize,
        grad_norm: f64,
        params: Box<crate::linnet::NetworkParams>,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serialize(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
