//! Training, evaluation, checkpoints, reports and the experiment driver.

mod checkpoint;
mod config;
mod report;
mod run;
mod train;

pub use checkpoint::Checkpoint;
pub use config::{load_dataset, DatasetConfig, DatasetKind, ExperimentConfig, ModelKind, SelectorOptions};
pub use report::{
    build_report, compare, emit_heatmap_pgm, emit_selection_pgm, heatmap_bytes, render_table, write_report,
    CompareReport, CompareRow, REFERENCE_FLOP_RATIO,
};
pub use run::{
    evaluate, evaluate_batched, obtain_targets, run_experiment, EvalMetrics, RunPaths, RunResult, RunSummary,
    TargetMap,
};
pub use train::{train_loop, EpochRecord, HistoryWriter, LoopSettings, TrainOutcome};

use crate::data::SaccadeRecord;

/// Index targets by image id.
pub fn targets_by_id(records: Vec<SaccadeRecord>) -> TargetMap {
    records.into_iter().map(|r| (r.image_id, r)).collect()
}
