//! Exit statuses: 0 success, 2 usage error, 3 validation failure, 4 runtime error.

use std::fmt;

pub const USAGE: i32 = 2;
pub const VALIDATION: i32 = 3;
pub const RUNTIME: i32 = 4;

/// Inputs were rejected, or a verification did not pass.
#[derive(Debug)]
pub struct Invalid(pub String);

impl fmt::Display for Invalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

pub fn code_for(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.is::<Invalid>() {
            return VALIDATION;
        }
        if let Some(e) = cause.downcast_ref::<markovdt::Error>() {
            return match e {
                markovdt::Error::Io(_) => RUNTIME,
                _ => VALIDATION,
            };
        }
        if cause.is::<toml::de::Error>() || cause.is::<serde_json::Error>() {
            return VALIDATION;
        }
    }
    RUNTIME
}
