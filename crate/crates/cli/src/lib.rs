//! Configuration, data files and subcommands of the `adrfit` command line.

pub mod bundle;
pub mod commands;
pub mod config;
pub mod error;
pub mod io;

pub use config::RunConfig;
pub use error::CliError;
