//! Library side of the `sdn` command: config layering, run recipes and commands.

pub mod commands;
pub mod config;
pub mod error;
pub mod pipeline;

pub use config::{Env, RunConfig};
pub use error::{CliError, CliResult};
