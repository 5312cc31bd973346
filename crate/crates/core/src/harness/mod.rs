//! Training loop, evaluation metrics, significance testing, grid runner and
//! report emission.

pub mod bootstrap;
pub mod config;
pub mod evaluate;
pub mod grid;
pub mod metrics;
pub mod report;
pub mod train;

pub use bootstrap::{bootstrap_significance, Metric};
pub use config::RunConfig;
pub use evaluate::{evaluate, evaluate_core, evaluate_with_order, RunReport};
pub use grid::{grid_run, grid_threads, GridSpec, THREADS_ENV};
pub use metrics::{bleu, edit_distance, wer};
pub use report::emit_report;
pub use train::{
    accumulate_step, prepare_run, train_adapter, train_prepared, LossRow, PreparedRun,
    TrainItem, TrainOutcome,
};
