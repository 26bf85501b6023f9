//! Evaluation, analysis and experiment orchestration.

pub mod config;
pub mod eval;
pub mod metrics;
pub mod pca;
pub mod pipeline;
pub mod probe;

pub use config::{AnalysisConfig, EvalConfig, ExperimentConfig, TaskConfig};
pub use eval::{evaluate, EvalEntry, EvalResult, EvalSpec, LatentSource, TaskOutcome};
pub use metrics::{mean_pass_at_k, pass_at_k, strategy_diversity, trace_style, Diversity, TraceStyle};
pub use pca::{pca_project, Pca};
pub use pipeline::{run_config, run_experiment, run_stages, Manifest, RunOptions, Stage, StageRecord, StageStatus};
