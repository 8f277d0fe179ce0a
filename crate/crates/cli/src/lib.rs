//! Experiment orchestration: configuration, fold suites and the command
//! implementations behind the `stlab` binary.

pub mod commands;
pub mod config;
pub mod suite;
