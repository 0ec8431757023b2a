//! Command-line front end: argument parsing, run configuration, the
//! feature cache and the subcommands.

pub mod args;
pub mod cache;
pub mod commands;
pub mod config;
