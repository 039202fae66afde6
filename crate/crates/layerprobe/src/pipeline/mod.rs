//! Experiment orchestration: config-driven sweeps over
//! (model × language × task × layer × seed), cache reuse, and report emission.

pub mod config;
pub mod ledger;
pub mod plot;
pub mod run;

use thiserror::Error;

pub use config::{
    BaselineKind, CoverageMap, ExperimentConfig, LayerSelection, ModelSpec, ModelSource,
};
pub use ledger::{plan, CellKey, CellStatus, RunLedger, Variant};
pub use run::{run, RunOutcome};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid config:\n{}", violations.join("\n"))]
    InvalidConfig { violations: Vec<String> },
    #[error("config file {path}: {message}")]
    ConfigFile { path: String, message: String },
    #[error(transparent)]
    Corpus(#[from] crate::corpus::CorpusError),
    #[error(transparent)]
    Control(#[from] crate::control::ControlError),
    #[error(transparent)]
    Extraction(#[from] crate::extraction::ExtractionError),
    #[error(transparent)]
    Baseline(#[from] crate::baselines::BaselineError),
    #[error(transparent)]
    Probe(#[from] crate::probe::ProbeError),
    #[error(transparent)]
    Metrics(#[from] crate::metrics::MetricsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
