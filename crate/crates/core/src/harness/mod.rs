//! Experiment plumbing: configuration, trial loops and metrics output.

pub mod config;
pub mod metrics;
pub mod runner;

use thiserror::Error;

pub use config::{parse_config, parse_config_str, ConfigError, DatasetSpec, ExperimentConfig};
pub use metrics::{evaluate, read_metrics, write_metrics, write_metrics_file, Evaluation, MetricsRecord, CSV_HEADER};
pub use runner::{
    bound_report, load_environment, partition_report, run_experiment, run_experiment_in, run_scheme_trial, trial_setup,
    Environment, PartitionReport, RunOutput, TrialSetup,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("data error: {0}")]
    Data(#[from] crate::data::DataError),
    #[error("model error: {0}")]
    Model(#[from] crate::model::ModelError),
    #[error("channel error: {0}")]
    Channel(#[from] crate::channel::ChannelError),
    #[error(transparent)]
    Scheme(#[from] crate::schemes::SchemeError),
    #[error("bound error: {0}")]
    Bound(#[from] crate::bound::BoundError),
    #[error("output error: {0}")]
    Output(#[from] csv::Error),
}

impl HarnessError {
    /// Short stable name for exit messages.
    pub fn name(&self) -> &'static str {
        match self {
            HarnessError::Config(_) => "ConfigError",
            HarnessError::Data(_) => "DataError",
            HarnessError::Model(_) => "ModelError",
            HarnessError::Channel(_) => "ChannelError",
            HarnessError::Scheme(_) => "SchemeError",
            HarnessError::Bound(_) => "BoundError",
            HarnessError::Output(_) => "OutputError",
        }
    }
}
