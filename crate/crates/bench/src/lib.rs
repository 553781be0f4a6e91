//! Benchmark harness for tiny-backbone anomaly detection.

pub mod config;
pub mod error;
pub mod grid;
pub mod report;

pub use config::{ExperimentConfig, Method};
pub use error::{BenchError, Result};
pub use grid::{run, Phase, RunOptions, RunSummary};
pub use report::{report_compare, BenchmarkRow};
