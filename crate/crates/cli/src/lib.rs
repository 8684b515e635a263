//! Command implementations and configuration for the `pointaugment` binary.

pub mod commands;
pub mod config;
