use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::optim::AdamConfig;
use super::schedule::ScheduleSpec;
use crate::error::{Error, Result};
use crate::objectives::ObjectiveConfig;
use crate::types::Phase;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimizerKind {
    AdamW,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub phase: Phase,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_ratio: f64,
    pub optimizer: OptimizerKind,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub objective: ObjectiveConfig,
    pub alpha_schedule: ScheduleSpec,
    pub seed: u64,
    /// Stops early after this many optimizer steps; the schedules still span the full run.
    pub max_steps: Option<u64>,
    pub cache_path: Option<PathBuf>,
    pub snapshot_path: Option<PathBuf>,
    pub log_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::desk_vit()
    }
}

pub const PRESETS: [&str; 3] = ["paper-lbp-7b", "desk-vit", "desk-dpo"];

impl TrainConfig {
    /// Hyperparameters of the published 7B preference-tuning run.
    pub fn paper_lbp_7b() -> Self {
        TrainConfig {
            phase: Phase::Dpo,
            epochs: 3,
            batch_size: 8,
            learning_rate: 5e-7,
            weight_decay: 0.01,
            warmup_ratio: 0.05,
            objective: ObjectiveConfig {
                beta: 0.1,
                gamma: 1.0,
                margin: true,
                ..ObjectiveConfig::default()
            },
            ..TrainConfig::desk_dpo()
        }
    }

    pub fn desk_vit() -> Self {
        TrainConfig {
            phase: Phase::Vit,
            epochs: 5,
            batch_size: 16,
            learning_rate: 3e-4,
            weight_decay: 0.0,
            warmup_ratio: 0.05,
            optimizer: OptimizerKind::AdamW,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            objective: ObjectiveConfig::default(),
            alpha_schedule: ScheduleSpec::fixed(0.0),
            seed: 0,
            max_steps: None,
            cache_path: None,
            snapshot_path: None,
            log_path: None,
        }
    }

    pub fn desk_dpo() -> Self {
        TrainConfig {
            phase: Phase::Dpo,
            objective: ObjectiveConfig {
                margin: true,
                ..ObjectiveConfig::default()
            },
            ..TrainConfig::desk_vit()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper-lbp-7b" => Ok(Self::paper_lbp_7b()),
            "desk-vit" => Ok(Self::desk_vit()),
            "desk-dpo" => Ok(Self::desk_dpo()),
            other => Err(Error::invalid(format!(
                "unknown preset {other:?}; expected one of {}",
                PRESETS.join(", ")
            ))),
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::invalid("warmup_ratio must lie in [0, 1)"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(
                "learning_rate must be finite and non-negative",
            ));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::invalid(
                "weight_decay must be finite and non-negative",
            ));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::invalid("adam betas must lie in [0, 1)"));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::invalid("adam_eps must be positive"));
        }
        self.alpha_schedule.validate()?;
        self.objective.validate()
    }

    /// Optimizer steps in a full run over `n` records.
    pub fn total_steps(&self, n: usize) -> u64 {
        (self.epochs * n.div_ceil(self.batch_size)) as u64
    }
}
