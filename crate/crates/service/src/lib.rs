//! HTTP API and command-line interface for the camera-trap labeling loop.

pub mod api;
pub mod cli;

pub use cli::CliError;
