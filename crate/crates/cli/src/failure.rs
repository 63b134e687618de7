use std::fmt;
use std::path::Path;

use pdnet_core::Error;

/// Process exit codes.
pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;

/// A command error tagged with the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    pub fn failed(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_FAILED,
            message: message.into(),
        }
    }

    pub fn io(path: &Path, err: impl fmt::Display) -> Self {
        Self {
            code: EXIT_IO,
            message: format!("{}: {err}", path.display()),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for Failure {
    fn from(err: Error) -> Self {
        let code = match &err {
            Error::Io { .. } | Error::Image { .. } | Error::Format { .. } | Error::Version { .. } | Error::Json(_) => {
                EXIT_IO
            }
            Error::StepSizeConstraint { .. } | Error::NonFiniteGradient { .. } => EXIT_FAILED,
            Error::Dimension { .. } | Error::InvalidParameter { .. } | Error::FeatureDesign(_) | Error::Config(_) => {
                EXIT_USAGE
            }
        };
        Self {
            code,
            message: err.to_string(),
        }
    }
}

pub type CmdResult<T> = Result<T, Failure>;
