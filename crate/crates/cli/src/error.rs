use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Invalid(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Core(#[from] catflow::Error),
    #[error("{0} check(s) failed")]
    ChecksFailed(usize),
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    /// 2 for anything the filesystem refused, 1 for everything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Io { .. } | CliError::Core(catflow::Error::Io(_)) => 2,
            _ => 1,
        }
    }
}

pub fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Invalid(msg.into())
}

/// Attach the offending path to an I/O error.
pub fn io_at(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}
