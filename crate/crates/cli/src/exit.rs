//! Process exit codes and the error type that carries them.

use std::fmt;

pub const CONFIG: u8 = 2;
pub const IO: u8 = 3;
pub const MISSING_PREREQUISITE: u8 = 4;

/// An error with a definite exit code. Anything else exits with 1.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub msg: String,
}

impl Failure {
    pub fn config(msg: impl Into<String>) -> Self {
        Self { code: CONFIG, msg: msg.into() }
    }

    pub fn io(msg: impl Into<String>) -> Self {
        Self { code: IO, msg: msg.into() }
    }

    pub fn missing(msg: impl Into<String>) -> Self {
        Self {
            code: MISSING_PREREQUISITE,
            msg: msg.into(),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.msg)
    }
}

impl std::error::Error for Failure {}

/// Exit code for an error chain: the first [`Failure`] found, else 1.
pub fn code_of(err: &anyhow::Error) -> u8 {
    err.chain()
        .find_map(|e| e.downcast_ref::<Failure>())
        .map_or(1, |f| f.code)
}
