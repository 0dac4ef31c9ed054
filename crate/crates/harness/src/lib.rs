//! Experiment orchestration: grid sweeps from simulation to scored models,
//! cached by content hash, with per-figure report tables.

pub mod config;
pub mod experiment;
pub mod report;

use std::path::{Path, PathBuf};

use thiserror::Error;

pub use config::ExperimentConfig;
pub use experiment::{run_cell, run_experiment, MetricRow, OutcomeRow, ReportTable, RunSummary};
pub use report::{report, Figure};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{failed} of {runs} runs failed to absorb; first failure: {first}")]
    Simulation { failed: usize, runs: usize, first: evowarn::evodyn::DynError },
    #[error("{figure} needs the table to vary along {}", axes.join(" or "))]
    MissingAxes { figure: String, axes: Vec<String> },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Dynamics(#[from] evowarn::evodyn::DynError),
    #[error(transparent)]
    Network(#[from] evowarn::netgen::NetError),
    #[error(transparent)]
    Dataset(#[from] evowarn::dataset::DatasetError),
    #[error(transparent)]
    Metric(#[from] evowarn::metrics::MetricError),
    #[error(transparent)]
    Train(#[from] evowarn_nn::trainer::TrainError),
    #[error(transparent)]
    Model(#[from] evowarn_nn::neural::ModelError),
}

impl HarnessError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.to_path_buf(), source }
    }
}
