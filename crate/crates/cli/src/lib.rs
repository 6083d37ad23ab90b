//! Command-line front end: config files, checkpoints on disk, and the
//! `params`, `train`, `eval`, `predict`, `synth` and `split` subcommands.

pub mod cli;
pub mod commands;
pub mod config;

pub use cli::{exit_code, run, Cli};
pub use config::{Assignments, ConfigError, RunConfig};
