//! Training/evaluation orchestration, cost accounting, and reporting.

mod checkpoint;
mod config;
mod cost;
mod metrics;
mod optim;
mod train;

pub use checkpoint::{
    load_checkpoint, load_checkpoint_header, save_checkpoint, CheckpointHeader, RngState,
};
pub use config::{Precision, RunConfig, ScheduleKind};
pub use cost::{
    count_params, flops_delta, lora_param_count, opro_param_count, CostInputs, CostReport,
    MATMULS_PER_EXP,
};
pub use metrics::{report_runs, MetricsRecord, RegimeRow, Report, RunSummary};
pub use optim::{lr_at, Adam};
pub use train::{evaluate_checkpoint, finetune_stage2, train_stage1, TrainOutcome};
