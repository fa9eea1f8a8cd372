use std::path::PathBuf;

/// Errors produced by the fitting engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot decode image {path}: {message}")]
    Decode { path: PathBuf, message: String },
    #[error("cannot encode image {path}: {message}")]
    Encode { path: PathBuf, message: String },
    #[error("unsupported channels: {0} (expected 8-bit grayscale or RGB)")]
    UnsupportedChannels(String),
    #[error("coordinate ({u}, {v}) is outside the unit square")]
    OutOfDomain { u: f64, v: f64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(
        "stale tape: recorded against parameter stamp {recorded}, parameters are at {current}"
    )]
    StaleTape { recorded: u64, current: u64 },
    #[error("stale weights: batch built for pass {built}, loss requested for pass {current}")]
    StaleWeights { built: u64, current: u64 },
    #[error("non-finite gradient entry at index {index}")]
    NonFiniteGradient { index: usize },
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error("training diverged: {0}")]
    Diverged(Box<crate::trainer::DivergenceSnapshot>),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
