//! File formats, run configuration and the command line for
//! [`contranerf_core`].

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod data;
pub mod error;

pub use error::{AppError, Result};
