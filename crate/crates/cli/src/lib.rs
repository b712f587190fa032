//! Configuration, orchestration and report emission for decentralized MCR²
//! experiments.

pub mod config;
pub mod error;
pub mod pipeline;
pub mod presets;
pub mod report;

pub use config::{Algorithm, ExperimentConfig};
pub use error::CliError;
pub use pipeline::{run_experiment, RunManifest};
