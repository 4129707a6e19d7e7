//! Experiment runner around `hinf_core`: JSON configs, multi-threaded Monte
//! Carlo, CSV traces and JSON summaries.

pub mod config;
pub mod output;
pub mod parallel;
pub mod runner;
pub mod seeds;

pub use config::{builtin_examples, prepare, ConfigError, Experiment, ExperimentConfig, Overrides};
pub use runner::{run_experiment, RunError, RunManifest};
