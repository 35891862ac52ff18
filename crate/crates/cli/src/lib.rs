//! Orchestration layer: experiment configuration, the perfect-model
//! protocol, and the commands behind the `lrd` binary.

pub mod commands;
pub mod config;
pub mod protocol;
pub mod svg;

pub use config::ExperimentConfig;
