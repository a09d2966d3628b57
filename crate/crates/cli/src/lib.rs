//! Command-line pipeline around `sspf-core`: dataset simulation, AHC
//! initialization, filtering, smoothing, decoding, tracing, oracle
//! posteriors and evaluation, with JSONL/binary file formats.

pub mod commands;
pub mod config;
pub mod error;
pub mod io;

pub use commands::{execute, Cli};
pub use error::CliError;
