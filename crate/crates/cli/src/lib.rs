//! Command-line tools and HTTP service over `ionlds-core`: synthetic cohorts,
//! per-patient fits, forecasts, what-if scenarios and model comparison.

pub mod commands;
pub mod config;
pub mod error;
pub mod forecasting;
pub mod jobs;
pub mod records;
pub mod server;
pub mod store;

pub use error::{AppError, AppResult};
