use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_MISMATCH: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    /// A check ran to completion and did not pass.
    #[error("check failed: {0}")]
    Check(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },

    #[error(transparent)]
    Core(#[from] spegc::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use spegc::Error as E;
        match self {
            Self::Check(_) => EXIT_CHECK,
            Self::Input(_) | Self::Io { .. } => EXIT_INPUT,
            Self::Core(E::VersionMismatch { .. }) => EXIT_MISMATCH,
            Self::Core(
                E::Shape { .. } | E::InvalidArgument { .. } | E::Malformed { .. } | E::Empty { .. },
            ) => EXIT_INPUT,
            Self::Core(_) => EXIT_CHECK,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> Self {
        let path = path.into();
        move |source| Self::Io { path, source }
    }
}

pub type CliResult<T> = Result<T, CliError>;
