//! Config parsing and subcommands behind the `infoat` binary.

pub mod commands;
pub mod config;
