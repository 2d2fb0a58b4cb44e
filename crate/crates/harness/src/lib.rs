//! Experiment harness: YAML configuration, the episode loop, metrics,
//! robustness sweeps, throughput benchmarks and result export.

use std::path::PathBuf;

use thiserror::Error;

use safectl_core::controllers::ControllerError;
use safectl_core::envs::EnvError;
use safectl_core::safefilters::FilterError;

pub mod bench;
pub mod build;
pub mod cli;
pub mod config;
pub mod export;
pub mod metrics;
pub mod run;
pub mod sweep;

pub use bench::{benchmark_throughput, BenchReport};
pub use cli::cli_main;
pub use config::{dump_config, load_config, parse_config, ConfigError, ExperimentConfig};
pub use export::{export_results, write_trace_csv, ExportSummary};
pub use metrics::{aggregate, compute_metrics, spearman, AggregateReport, MeanStd, MetricsReport};
pub use run::{collect_transitions, run_episode, run_experiment, train_gp, EpisodeTrace, Transition};
pub use sweep::{robustness_sweep, SweepAxis, SweepPoint, SweepReport};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Runtime(String),
}
