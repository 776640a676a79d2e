//! Command line and HTTP front ends over `phenoscope-core`.

pub mod api;
pub mod commands;
pub mod error;
pub mod input;

pub use error::CliError;
