use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A row of an input file could not be parsed.
    #[error("{}:{line}: {msg}", path.display())]
    Parse {
        path: PathBuf,
        line: u64,
        msg: String,
    },

    /// Well-formed input that violates a data invariant.
    #[error("invalid data: {0}")]
    Validation(String),

    /// Bad hyperparameters or configuration keys.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Training produced a non-finite value.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: u64, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }
}
