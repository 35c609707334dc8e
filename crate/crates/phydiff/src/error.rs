use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] phydiff_core::Error),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{0}")]
    Usage(String),
}

impl Error {
    pub fn io(path: &Path) -> impl FnOnce(io::Error) -> Error + '_ {
        move |source| Error::Io { path: path.to_path_buf(), source }
    }

    /// 1 for bad input (flags, config, request), 2 for failures while doing the work.
    pub fn exit_code(&self) -> i32 {
        use phydiff_core::Error as C;
        match self {
            Error::Usage(_) => 1,
            Error::Core(C::Config { .. } | C::ConfigParse(_) | C::Invalid(_)) => 1,
            _ => 2,
        }
    }
}
