//! Library side of the `ctfwp` command: config parsing, dataset loading and
//! the subcommands.

pub mod commands;
pub mod config;
pub mod dataset;
