//! Synthetic data, experiment configuration and driver, result summaries and
//! the sampler benchmark.

pub mod bench;
pub mod config;
pub mod dataset;
pub mod experiment;

pub use bench::{bench_sampler_overhead, BenchRow};
pub use config::ExperimentConfig;
pub use dataset::{dataset_digest, generate_dataset, DatasetSpec};
pub use experiment::{
    emit_summary, read_summary, run_experiment, ArmResult, ExperimentResult, RunOutcome,
};
