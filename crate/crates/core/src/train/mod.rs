//! Two-stage training: optimizer, schedule, losses, evaluation and run artifacts.

pub mod config;
pub mod eval;
pub mod loss;
pub mod optim;
pub mod pipeline;

pub use config::TrainingConfig;
pub use eval::{evaluate, evaluate_with, EvalReport};
pub use loss::{total_loss, LossReport};
pub use optim::{lr_at, AdamW};
pub use pipeline::{
    derive_seed, run_datasets, run_phase, run_pipeline, run_stage2_from, train_dense_stage2, train_stage1, train_stage2,
    upcycle_for, MetricLog, Phase, PhaseIo, PhaseLog, RunSummary, METRIC_HEADER,
};
