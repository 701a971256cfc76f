use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Fixed,
    Cosine,
}

/// A scalar hyperparameter that may anneal over training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub start_value: f64,
    pub end_value: f64,
}

impl ScheduleSpec {
    pub fn fixed(value: f64) -> Self {
        ScheduleSpec {
            kind: ScheduleKind::Fixed,
            start_value: value,
            end_value: value,
        }
    }

    pub fn cosine(start: f64, end: f64) -> Self {
        ScheduleSpec {
            kind: ScheduleKind::Cosine,
            start_value: start,
            end_value: end,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v >= 0.0 && v.is_finite();
        if !ok(self.start_value) || !ok(self.end_value) {
            return Err(Error::invalid(
                "schedule values must be finite and non-negative",
            ));
        }
        if self.kind == ScheduleKind::Cosine && self.start_value < self.end_value {
            return Err(Error::invalid("cosine schedule must not increase"));
        }
        Ok(())
    }

    /// Multiplies both endpoints by `k`.
    pub fn scaled(self, k: f64) -> Self {
        ScheduleSpec {
            start_value: self.start_value * k,
            end_value: self.end_value * k,
            ..self
        }
    }
}

/// Value of the schedule at `step` of `total_steps`.
pub fn alpha_at(schedule: &ScheduleSpec, step: u64, total_steps: u64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::invalid("total_steps must be at least 1"));
    }
    if step > total_steps {
        return Err(Error::invalid(format!(
            "step {step} beyond total {total_steps}"
        )));
    }
    Ok(match schedule.kind {
        ScheduleKind::Fixed => schedule.start_value,
        ScheduleKind::Cosine => {
            let (a, b) = (schedule.start_value, schedule.end_value);
            if step == total_steps {
                return Ok(b);
            }
            let c = (std::f64::consts::PI * step as f64 / total_steps as f64).cos();
            b + 0.5 * (a - b) * (1.0 + c)
        }
    })
}

/// Number of warmup steps for a run of `total_steps`.
pub fn warmup_steps(warmup_ratio: f64, total_steps: u64) -> u64 {
    (warmup_ratio * total_steps as f64).round() as u64
}

/// Linear warmup from zero, then cosine decay to zero at `total_steps`.
pub fn lr_at(base: f64, warmup: u64, step: u64, total_steps: u64) -> f64 {
    if step < warmup {
        return base * step as f64 / warmup as f64;
    }
    let span = total_steps.saturating_sub(warmup);
    if span == 0 {
        return base;
    }
    let t = (step - warmup).min(span) as f64 / span as f64;
    0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
}
