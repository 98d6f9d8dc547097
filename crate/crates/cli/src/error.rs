use std::fmt;
use std::path::Path;

use matir_core::Error;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, bad input files, validation failures.
    User(String),
    /// A required backend could not be reached.
    Backend(String),
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::User(_) => 2,
            CliError::Backend(_) => 3,
            CliError::Internal(_) => 1,
        }
    }

    pub fn user(msg: impl Into<String>) -> Self {
        CliError::User(msg.into())
    }

    /// Wraps a failure to open or read a user-supplied file.
    pub fn file(path: &Path, e: impl fmt::Display) -> Self {
        CliError::User(format!("{}: {e}", path.display()))
    }

    pub fn in_file(path: &Path) -> impl FnOnce(Error) -> Self + '_ {
        move |e| match CliError::from(e) {
            CliError::User(m) => CliError::User(format!("{}: {m}", path.display())),
            other => other,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::User(m) | CliError::Backend(m) | CliError::Internal(m) => f.write_str(m),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::BackendUnavailable(_) => CliError::Backend(e.to_string()),
            _ => CliError::User(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Internal(e.to_string())
    }
}
