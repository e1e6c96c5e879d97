use std::path::PathBuf;

/// Errors produced by any stage of the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// Parse failure in a dataset or checkpoint file. `row` and `col` are
    /// 1-based positions within the payload being parsed.
    #[error("parse error in {path} at row {row}, column {col}: {message}")]
    Parse {
        path: PathBuf,
        row: usize,
        col: usize,
        message: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Raised by the training loop when a loss component goes non-finite.
    #[error("non-finite loss in component `{component}` at epoch {epoch}, iteration {iteration}")]
    Divergence {
        component: String,
        epoch: usize,
        iteration: usize,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
