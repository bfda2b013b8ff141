//! Orchestration for the `sbgan` command: run configuration, metrics logs
//! and the subcommands.

pub mod commands;
pub mod config;
pub mod metrics;

pub use config::RunConfig;
