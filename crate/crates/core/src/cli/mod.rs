//! Config-driven front end: experiments, artifacts and reports.

pub mod config;
pub mod experiments;
pub mod report;

pub use config::{load_config, parse_config, ConfigError, ExperimentConfig};
pub use experiments::{run_experiment, RunError};
pub use report::{write_report, Metric, Report, Status};
