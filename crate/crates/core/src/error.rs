use std::path::PathBuf;

use thiserror::Error;

use crate::optimize::HistoryRow;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },

    #[error("schedule error: {0}")]
    Schedule(String),

    #[error("condition error: {0}")]
    Condition(String),

    #[error("sampler configuration error: {0}")]
    Config(String),

    #[error("structure embedding requires var(x_T) > var(w_s) (got {latent_var} <= {watermark_var})")]
    Radicand { latent_var: f64, watermark_var: f64 },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("ill-conditioned whitening: {0}")]
    Conditioning(String),

    #[error("adjoint diverged at step {step}")]
    Divergence { step: usize },

    #[error("optimization diverged at iteration {iteration}")]
    OptimizationDiverged {
        iteration: usize,
        history: Box<Vec<HistoryRow>>,
    },

    #[error("state error: {0}")]
    State(String),

    #[error("report error: {0}")]
    Report(String),

    #[error("profile error: {0}")]
    Profile(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
