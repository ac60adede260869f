//! Library half of the `dualrl` command: configuration, provenance and the
//! pipeline stages, so they can be driven from tests as well as the binary.

pub mod commands;
pub mod config;
pub mod error;
pub mod provenance;

pub use error::{CliError, CliResult};
