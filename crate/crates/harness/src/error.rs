use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    /// Malformed or mistyped file contents.
    #[error("{}:{line}:{column}: at `{field}`: {message}", path.display())]
    Schema {
        path: PathBuf,
        line: usize,
        column: usize,
        field: String,
        message: String,
    },
    #[error("{0}")]
    Validation(String),
    #[error(transparent)]
    Core(#[from] vql_core::Error),
}

impl Error {
    /// 2 for anything wrong with the inputs, 1 for failures of the tool itself.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } => 1,
            Error::Schema { .. } | Error::Validation(_) | Error::Core(_) => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
