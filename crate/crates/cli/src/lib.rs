//! Pipeline library behind the `aasn` binary.
//!
//! Everything the binary does — dataset generation, training, evaluation,
//! warp previews, gradient checks — lives here as plain functions over a
//! [`config::RunConfig`], so integration tests and benchmarks can drive the
//! same code paths in-process.

pub mod check;
pub mod config;
pub mod data;
pub mod evalcmd;
pub mod gendata;
pub mod traincmd;
pub mod warpcmd;

use aasn_core::Error;

/// Process exit code for an error: configuration and file-format problems
/// are usage errors (1); everything else is a runtime failure (2). Check
/// failures use 3, returned by the commands themselves rather than an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Format(_) => 1,
        _ => 2,
    }
}
