use std::fmt;

use salienteye::{Error, ErrorKind};

pub const EXIT_INPUT: u8 = 2;
pub const EXIT_INSUFFICIENT: u8 = 3;
pub const EXIT_MODEL: u8 = 4;

/// A command failure with its process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn input(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_INPUT,
            message: message.into(),
        }
    }

    pub fn insufficient(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_INSUFFICIENT,
            message: message.into(),
        }
    }

    /// Any error while loading or using a model artifact.
    pub fn model(err: impl fmt::Display) -> Self {
        Failure {
            code: EXIT_MODEL,
            message: err.to_string(),
        }
    }

    pub fn context(self, prefix: impl fmt::Display) -> Self {
        Failure {
            message: format!("{prefix}: {}", self.message),
            ..self
        }
    }
}

impl From<Error> for Failure {
    fn from(err: Error) -> Self {
        let code = match err.kind() {
            ErrorKind::Input => EXIT_INPUT,
            ErrorKind::Insufficient => EXIT_INSUFFICIENT,
            ErrorKind::Model => EXIT_MODEL,
        };
        Failure {
            code,
            message: err.to_string(),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}
