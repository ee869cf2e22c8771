//! Datasets, seeded experiments, metrics and reports.

mod config;
mod dataset;
mod experiment;
mod metrics;

pub use config::{BackendKind, Config, DatasetConfig, ExperimentSettings};
pub use dataset::{load_dataset, sample_shots, split_for_seed, write_dataset, DataFormat, Dataset};
pub use experiment::{
    read_report_csv, render_summary_table, run_experiment, summarize, ExperimentSpec, Method, MethodRun, MethodSummary,
    MetricsReport, ReportRow, Timing,
};
pub use metrics::{macro_f1, mean_sd, ClassMetrics, ConfusionMatrix};
