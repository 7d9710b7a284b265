//! Training loop: one mini-batch step, evaluation, and the full schedule.

mod config;
mod eval;
mod run;
mod step;

pub use config::{Mode, TrainConfig};
pub use eval::{evaluate_miou, Confusion, MiouReport};
pub use run::{read_metrics, run, steps_per_epoch, MetricsRow, RunPaths, RunSummary, EVAL_HEADER, METRICS_HEADER};
pub use step::{train_step, LossNodes, LossNodesValue, StepOutcome, StepPlan};
