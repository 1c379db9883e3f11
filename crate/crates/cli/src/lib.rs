//! Command-line interface, run configuration and HTTP service.

pub mod commands;
pub mod config;
pub mod service;

pub use commands::run_command;
pub use config::{RunConfig, Workspace, WORKSPACE_ENV};
