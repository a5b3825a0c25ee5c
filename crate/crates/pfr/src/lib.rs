//! File formats, run configuration and the `pfr` command-line tool built on
//! [`pfr_core`].

pub mod archive;
pub mod cli;
pub mod config;
mod error;
pub mod io;
pub mod manifest;
pub mod parallel;
pub mod report;

pub use error::{Error, Result};
