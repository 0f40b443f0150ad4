//! File formats, reports, the acceptance suite and the command line for
//! [`quartet_core`].

pub mod cli;
pub mod config;
pub mod error;
pub mod formats;
pub mod selftest;

pub use error::{Error, Result};
