use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("lookup error: unknown sample id {0}")]
    Lookup(usize),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("failed to load {}: {msg}", path.display())]
    Load { path: PathBuf, msg: String },

    #[error("failed to parse {}: {msg}", path.display())]
    Parse { path: PathBuf, msg: String },

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),

    #[error("training diverged at step {step}: {msg}")]
    Diverged { step: usize, msg: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Errors caused by bad user input rather than a failing run.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Validation(_)
                | Error::Schema(_)
                | Error::Lookup(_)
                | Error::Incompatible(_)
        )
    }
}
