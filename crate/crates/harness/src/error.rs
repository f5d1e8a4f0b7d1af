use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    /// `line` 0 marks a command-line override.
    #[error("config {}: {message}", if *line == 0 { "override".to_string() } else { format!("line {line}") })]
    ConfigSyntax { line: usize, message: String },
    #[error("config: {0}")]
    Config(String),
    #[error("{path}:{line}: {message}")]
    Format {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error(transparent)]
    Core(#[from] cst_core::Error),
}

impl HarnessError {
    /// Process exit status: 2 for numeric divergence, 1 for everything
    /// else.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Core(cst_core::Error::Divergence { .. }) => 2,
            _ => 1,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> HarnessError {
        let path = path.into();
        move |source| HarnessError::Io { path, source }
    }

    pub(crate) fn csv(path: impl Into<PathBuf>) -> impl FnOnce(csv::Error) -> HarnessError {
        let path = path.into();
        move |source| HarnessError::Csv { path, source }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;
