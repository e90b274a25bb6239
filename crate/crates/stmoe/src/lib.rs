//! File formats, checkpoints, reports and the command pipeline around
//! `stmoe-core`.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod pipeline;
pub mod report;

pub use error::{AppError, AppResult};
