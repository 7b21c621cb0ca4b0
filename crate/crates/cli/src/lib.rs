//! Library side of the `odenorm` command: configuration, subcommands and
//! the sweep summary table.

pub mod commands;
pub mod config;
pub mod summary;
