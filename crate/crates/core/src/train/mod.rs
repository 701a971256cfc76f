//! Deterministic training loops, schedules, the optimizer and the gradient check.

pub mod config;
pub mod gradcheck;
pub mod optim;
pub mod run;
pub mod schedule;
pub mod step;

pub use config::{OptimizerKind, TrainConfig, PRESETS};
pub use gradcheck::{
    dpo_variants, grad_check_dpo, grad_check_vit, vit_variants, GradCheckReport, GradCheckSpec,
};
pub use optim::{AdamConfig, AdamW};
pub use run::{train_dpo, train_vit, TrainOutcome};
pub use schedule::{alpha_at, lr_at, warmup_steps, ScheduleKind, ScheduleSpec};
pub use step::{dpo_batch, vit_batch, BatchStats};
