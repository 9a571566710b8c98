//! Orchestration behind the `eit` binary: configuration, subcommands and
//! the verification suites.

pub mod commands;
pub mod config;
pub mod verify;

use eit_core::EitError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;
pub const EXIT_VERIFICATION: i32 = 3;

/// Process exit code for an error.
pub fn exit_code(e: &EitError) -> i32 {
    if e.is_validation() {
        EXIT_VALIDATION
    } else {
        EXIT_NUMERICAL
    }
}
