use std::path::{Path, PathBuf};

use camtraj_core::Error as CoreError;

/// Failure class, which decides the process exit code.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    /// Missing, corrupt or invalid input: exit code 1.
    Input,
    /// The computation itself failed: exit code 2.
    Numerical,
}

#[derive(Debug, thiserror::Error)]
#[error("{message}")]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn input(message: impl Into<String>) -> Self {
        Self {
            kind: ErrorKind::Input,
            message: message.into(),
        }
    }

    pub fn numerical(message: impl Into<String>) -> Self {
        Self {
            kind: ErrorKind::Numerical,
            message: message.into(),
        }
    }

    pub fn io(path: &Path, err: std::io::Error) -> Self {
        Self::input(format!("{}: {err}", path.display()))
    }

    /// Prefix the message with the file it concerns.
    pub fn at(self, path: &Path) -> Self {
        Self {
            kind: self.kind,
            message: format!("{}: {}", path.display(), self.message),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind {
            ErrorKind::Input => 1,
            ErrorKind::Numerical => 2,
        }
    }

    /// The single line printed to stderr, e.g. `error[input]: ...`.
    pub fn line(&self) -> String {
        let tag = match self.kind {
            ErrorKind::Input => "input",
            ErrorKind::Numerical => "numerical",
        };
        format!("error[{tag}]: {}", self.message.replace('\n', " "))
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::NonFiniteLoss(_) | CoreError::DegenerateAlignment(_) | CoreError::ZeroPredictedMass(_) => {
                Self::numerical(e.to_string())
            }
            other => Self::input(other.to_string()),
        }
    }
}

pub(crate) fn missing(path: PathBuf) -> CliError {
    CliError::input(format!("{}: file not found", path.display()))
}
