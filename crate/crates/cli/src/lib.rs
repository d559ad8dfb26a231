//! Command-line surface tying the engine together into reproducible
//! experiments: data generation, training, evaluation, benchmarks, the
//! cost model, and the attention analyzer.

pub mod checkpoint;
pub mod commands;
pub mod config;

pub use config::ExperimentConfig;
