//! End-to-end runs with a content-addressed stage cache, one-axis sweeps,
//! reward statistics and SVG/CSV exports.

pub mod config;
pub mod export;
pub mod pipeline;
pub mod projection;
pub mod stats;
pub mod sweep;

pub use config::{ExperimentConfig, RlConfig};
pub use export::{
    embedding_labels, export_embedding_projection, export_reward_histogram, export_training_curve,
    line_chart_svg, rewards_by_label, HistogramSummary, HISTOGRAM_BINS,
};
pub use pipeline::{
    eval_seed, read_record, run_pipeline, run_pipeline_in, run_seed, run_shared_stages,
    DataArtifacts, RewardStats, RunPaths, RunRecord, SeedResult, SharedStages, StageCache,
};
pub use projection::{logistic_auc, pca_2d, roc_auc, LogisticModel, Projection};
pub use stats::{
    excess_kurtosis, interquartile_range, mean, quantile_sorted, variance, GroupStats,
};
pub use sweep::{run_sweep, sweep_csv, SweepAxis, SweepResult, SweepRow};
