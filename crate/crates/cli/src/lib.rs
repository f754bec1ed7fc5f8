//! Configuration and command implementations behind the `sane` binary.

pub mod commands;
pub mod config;

pub use commands::{CliError, VERSION};
pub use config::{ConfigError, RunConfig};
