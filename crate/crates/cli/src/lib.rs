//! File formats, run configuration and subcommands behind the `geonlf` binary.

pub mod commands;
pub mod config;
pub mod io;
pub mod plot;
