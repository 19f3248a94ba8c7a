//! Command implementations for the `quest` binary.

pub mod commands;
pub mod config;
pub mod io;
pub mod setup;

pub use config::ExperimentConfig;
