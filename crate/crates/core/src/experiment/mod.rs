//! The full self-training loop with checkpointing and CSV/SVG reports.

mod compare;
mod config;
mod report;
mod run;

pub use compare::{compare_modes, write_comparison, CellResult, Comparison, ComparisonRow, Spread, COMPARE_FILE};
pub use config::{ExperimentConfig, WorldConfig};
pub use report::{
    emit_report, read_metrics_csv, read_selection_csv, svg_line_plot, write_metrics_csv, write_selection_csv,
    SelectionRow, Series, METRICS_FILE, SELECTION_COLUMNS, SELECTION_FILE,
};
pub use run::{evaluate_model, run_experiment, DataChecksums, Datasets, Evaluation, ExperimentState, RunControl, RunOutcome};
