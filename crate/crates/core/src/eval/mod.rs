//! Confusion matrices, mean class accuracy, run aggregation and the
//! label-fraction ablation.

mod ablation;
mod metrics;
mod svg;

pub use ablation::{
    ablation, run_cell, AblationConfig, AblationResult, AblationRow, CellResult, CurvePoint, FinetuneSetup, Variant,
};
pub use metrics::{aggregate_runs, mean_class_accuracy, mean_std, ConfusionMatrix, RunSummary};
pub use svg::curve_svg;
