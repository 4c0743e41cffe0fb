//! The `trainforge` command line and HTTP app server.

pub mod app;
pub mod cli;

pub use cli::{run, run_cli, Cli};
