// SPDX-License-Identifier: MIT OR Apache-2.0

//! Command-line driver and HTTP probe service for the `tunedlens` workbench.
//!
//! The binary is a thin wrapper: [`Cli`] is parsed with clap and handed to
//! [`run`]. Tests drive the same entry point in-process.

pub mod args;
pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
pub mod serve;

pub use args::{Cli, Command};
pub use error::CliError;

/// Executes one parsed invocation.
pub fn run(cli: Cli) -> Result<(), CliError> {
    let config = config::LoadedConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Synth(a) => commands::synth(&a, &config).map(drop),
        Command::Train(a) => commands::train(&a, &config).map(drop),
        Command::Eval(a) => commands::eval(&a, &config).map(drop),
        Command::Probe(a) => commands::probe(&a, &config).map(drop),
        Command::Serve(a) => serve::serve_command(&a, &config),
    }
}
