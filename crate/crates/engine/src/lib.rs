//! File formats, predictor transports, configuration and the batch runner.

pub mod cli;
pub mod config;
pub mod error;
pub mod fsutil;
pub mod nifti;
pub mod predictors;
pub mod protocol;
pub mod raw;
pub mod report;
pub mod runner;
