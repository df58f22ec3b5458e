use std::path::Path;

use thiserror::Error;

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] onestream::Error),
    #[error(transparent)]
    Tensor(#[from] onestream_tensor::TensorError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Core(onestream::Error::Config { .. }) => "config",
            CliError::Core(onestream::Error::Parse { .. } | onestream::Error::Binary { .. }) => "parse",
            CliError::Core(onestream::Error::Io(_)) | CliError::Io { .. } => "io",
            CliError::Core(_) => "runtime",
            CliError::Tensor(_) => "checkpoint",
            CliError::Other(_) => "usage",
        }
    }

    /// `error kind=<kind>: <message>` on a single line.
    pub fn one_line(&self) -> String {
        let msg = self.to_string().replace(['\n', '\r'], " ");
        format!("error kind={}: {msg}", self.kind())
    }
}
