//! File formats, checkpoint IO, rendering and the command-line driver for
//! [`diagnet_core`].

pub mod checkpoint;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod exec;
pub mod losslog;
pub mod manifest;
pub mod render;

pub use error::{CliError, Result};
