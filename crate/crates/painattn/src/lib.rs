//! File formats, fold-parallel evaluation and the `painattn` command line
//! for [`painattn_core`].

mod bytes;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod manifest;
pub mod parallel;

pub use error::{AppError, AppResult, FormatError};
