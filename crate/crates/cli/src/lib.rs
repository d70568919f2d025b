//! Library surface of the CLI so integration tests can drive commands
//! in-process.

pub mod commands;
pub mod config;
pub mod report;
