//! Pipeline orchestration: configuration, stage runners, manifests and
//! figure-data reports.

pub mod config;
pub mod error;
pub mod manifest;
pub mod report;
pub mod stages;

pub use config::PipelineConfig;
pub use error::CliError;
