//! Command implementations and report formatting for the `steinlab` binary.

pub mod commands;
pub mod report;

pub use commands::{run, Cli, CliError};
pub use report::RunReport;
