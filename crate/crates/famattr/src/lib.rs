//! Std companion of `famattr-core`: run orchestration, file formats, the
//! wall clock and the `famattr` command line.

pub mod cells;
pub mod cli;
pub mod clock;
pub mod config;
pub mod error;
pub mod formats;
pub mod pipeline;
pub mod report;
pub mod stages;

pub use error::{AppError, AppResult};
pub use famattr_core as core;
