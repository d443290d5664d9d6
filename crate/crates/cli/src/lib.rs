//! Command-line front end and HTTP service.

pub mod commands;
pub mod server;

pub use commands::{run, Cli, Command};
