//! Config parsing, seed sweeps, CSV persistence and SVG plots.

pub mod cli;
pub mod compare;
pub mod config;
pub mod plot;
pub mod sweep;

pub use config::{parse_config, ConfigError, ConfigErrors, ExperimentConfig};
pub use sweep::{run_jobs, run_sweep, Job, RunRecord, RunStatus};
