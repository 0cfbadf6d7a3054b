use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{}: format error at byte {offset}: {msg}", path.display())]
    Format {
        path: PathBuf,
        offset: u64,
        msg: String,
    },
    #[error(transparent)]
    Core(#[from] covnet_core::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: &Path, source: io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn format(path: &Path, offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.to_path_buf(),
            offset,
            msg: msg.into(),
        }
    }

    /// Process exit code: 2 config, 3 I/O or format, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        use covnet_core::Error as C;
        match self {
            Error::Config(_) => 2,
            Error::Io { .. } | Error::Format { .. } => 3,
            Error::Core(
                C::InvalidArgument(_) | C::ResourceLimit { .. } | C::UnsupportedDimension(_),
            ) => 2,
            Error::Core(_) => 4,
        }
    }
}
