//! Experiment driver: versioned TOML run configs, pipelines and reports.

pub mod config;
pub mod pipeline;
pub mod plots;

pub use config::{validate_config, ConfigError, Pipeline, RunConfig};
pub use pipeline::{run_pipeline, RunReport, StageError};
