//! Config-driven experiment runner: partitions a corpus across two sites,
//! trains local GANs and FELICIA generators, sweeps checkpoints for
//! downstream utility, and writes CSV reports.

pub mod config;
pub mod manifest;
pub mod pipeline;
pub mod plot;

pub use config::{validate_config, ConfigError, ExperimentConfig};
pub use manifest::{RunManifest, RunStatus, Stage};
pub use pipeline::{resume, run_experiment, RunError};
pub use plot::{emit_plot_data, Figure};
