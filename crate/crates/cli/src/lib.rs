//! Command implementations behind the `mecdiff` binary.
//!
//! Each `cmd_*` function takes plain option structs so it can be driven from
//! tests as well as from the argument parser in `main.rs`.

pub mod commands;
pub mod config;

pub use commands::{
    cmd_couple, cmd_evaluate, cmd_pretrain, cmd_translate, CoupleArgs, Direction, EvaluateArgs, Metric, MetricRow, PretrainArgs,
    TranslateArgs,
};
pub use config::RunConfig;

use mecdiff::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => EXIT_USAGE,
        Error::NonFinite(_) => EXIT_NUMERICAL,
        Error::Shape(_)
        | Error::Dimension { .. }
        | Error::DataRow { .. }
        | Error::Data(_)
        | Error::BadMagic { .. }
        | Error::Truncated(_)
        | Error::VersionMismatch { .. }
        | Error::CheckpointFormat(_)
        | Error::EmptyBuffer
        | Error::Io(_)
        | Error::Csv(_) => EXIT_DATA,
    }
}
