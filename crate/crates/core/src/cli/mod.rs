//! Command-line front end: configuration and pipeline commands.

pub mod commands;
pub mod config;
