//! Experiment configuration, the ablation harness and the `ppc` subcommands.

pub mod ablate;
pub mod commands;
pub mod config;
pub mod world;

pub use ablate::{run_ablation, AblationReport, Variant};
pub use commands::Session;
pub use config::{ExperimentConfig, Overrides, Task};
