//! Experiment orchestration: JSON configs, cached pipeline stages, run
//! manifests, figures and cross-run comparison tables.

pub mod compare;
pub mod config;
pub mod pipeline;
pub mod plots;

pub use compare::{compare_manifests, compare_runs, ComparisonRow, RowKind};
pub use config::{apply_override, content_hash, DatasetConfig, EvaluationConfig, ExperimentConfig, FeatureSource, PlotConfig, StatsConfig};
pub use pipeline::{run_experiment, BaselineReport, Pipeline, RunManifest, RunSummary, StageRecord};
pub use plots::emit_plots;
