use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error in {field}: {detail}")]
    Parse { field: &'static str, detail: String },

    #[error("input error: {0}")]
    Input(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error("training error at step {step}: {detail}")]
    Training { step: usize, detail: String },

    #[error("setup error: {0}")]
    Setup(String),

    #[error("integrity error in {}: {detail}", path.display())]
    Integrity { path: PathBuf, detail: String },

    #[error("aggregation error: {0}")]
    Aggregate(String),

    #[error("plot error: {0}")]
    Plot(String),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Parse { .. } | Error::Setup(_) | Error::Integrity { .. } | Error::Io { .. } => 2,
            Error::Csv(_) | Error::Aggregate(_) | Error::Plot(_) => 2,
            Error::Input(_) | Error::Internal(_) | Error::Training { .. } => 3,
        }
    }
}
