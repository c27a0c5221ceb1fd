//! Slide-level metrics, score exports and experiment sweeps.

mod metrics;
mod scores;
mod sweep;

pub use metrics::{balanced_error, confusion, error_rates, roc_auc, ConfusionMatrix, RocCurve, RocPoint};
pub use scores::{load_scores, parse_scores, scores_csv, ScoreRecord, SCORE_HEADER};
pub use sweep::{
    augment_cells, magnification_cells, median, nested_subsets, parse_sweep_csv, repeat_seed, run_cell, run_cells,
    score_records, size_cells, summarize, sweep_csv, weight_cells, CellResult, SweepCell, SweepKind, SweepRow,
    SWEEP_HEADER,
};
