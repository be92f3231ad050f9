//! Cross-validation driver: configs, grid runs and metric reports.

mod config;
mod cv;

pub use config::{
    default_lambda_grid, default_sigma2_grid, log_grid, Dataset, DiffusionParams, ExperimentConfig, ModelKind,
    NegativeConfig, SolverConfig,
};
pub use cv::{metric_key, run_cv, run_cv_on, CellRecord, CellStatus, MetricsReport, Selection};
