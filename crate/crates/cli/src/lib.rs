//! Configuration, drivers and output bundle behind the `ersatz` binary.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;
