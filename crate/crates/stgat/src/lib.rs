//! File formats, the seeded experiment harness and the `stgat` command-line
//! tool built on `stgat-core`.

pub mod cli;
pub mod config;
pub mod csv_io;
pub mod error;
pub mod harness;
pub mod manifest;
pub mod model_file;
pub mod report;

pub use error::{Error, Result};
