use std::fmt::Display;

use thiserror::Error;

/// A failed command, classified by who has to fix it.
#[derive(Debug, Error)]
pub enum CommandError {
    /// Bad flags or flag combinations.
    #[error("{0}")]
    Usage(String),
    /// Missing, malformed or inconsistent input files.
    #[error("{0}")]
    Data(String),
    /// Everything else: output I/O, numerical failure, server errors.
    #[error("{0}")]
    Runtime(String),
}

impl CommandError {
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Usage(_) => 1,
            Self::Data(_) => 2,
            Self::Runtime(_) => 3,
        }
    }
}

pub(crate) fn data<E: Display>(context: impl Display) -> impl FnOnce(E) -> CommandError {
    move |e| CommandError::Data(format!("{context}: {e}"))
}

pub(crate) fn runtime<E: Display>(context: impl Display) -> impl FnOnce(E) -> CommandError {
    move |e| CommandError::Runtime(format!("{context}: {e}"))
}
