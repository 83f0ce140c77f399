//! Command-line driver: workspace layout, configuration and subcommands.

pub mod commands;
pub mod config;
pub mod error;
pub mod workspace;
