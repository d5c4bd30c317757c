use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes or layer geometry do not line up.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Caller-supplied data is outside the accepted domain (e.g. a label >= C).
    #[error("input error: {0}")]
    Input(String),

    /// An API was called in a state where the call makes no sense.
    #[error("usage error: {0}")]
    Usage(String),

    /// NaN / Inf showed up in values, gradients or the loss.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A dataset file is missing, truncated or has the wrong layout.
    #[error("format error in {}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },

    /// Checkpoint / model mismatch, bad CRC, wrong version.
    #[error("integrity error: {0}")]
    Integrity(String),

    /// A pruning policy could not produce a decision.
    #[error("policy error: {0}")]
    Policy(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// Process exit code used by the CLI: 2 config, 3 data, 4 numeric, 1 other.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Format { .. } => 3,
            Error::Numeric(_) => 4,
            _ => 1,
        }
    }
}
