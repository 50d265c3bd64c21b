//! Config-driven experiment runner for human value detection.

pub mod commands;
pub mod config;

use hvd_core::Error;

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_INTEGRITY: i32 = 3;

/// Process exit code for a failed command.
pub fn exit_code(error: &Error) -> i32 {
    match error {
        Error::Config { .. } | Error::Toml(_) => EXIT_CONFIG,
        Error::Integrity(_) => EXIT_INTEGRITY,
        _ => EXIT_FAILURE,
    }
}
