//! Numeric summaries of reward / language-bias trajectories.

use serde::{Deserialize, Serialize};

use crate::types::{BiasRecord, Component, Phase};

/// Fraction of the final steps averaged into the terminal values.
pub const DEFAULT_TAIL: f64 = 0.1;

/// Pearson correlation; `None` when either series has zero variance or fewer than two points.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Terminal {
    pub reward: f64,
    pub bias: f64,
    pub abs_bias: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward_rejected: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias_rejected: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
    /// Mean of the VIT component alone, when logged.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vit_loss: Option<f64>,
    pub window: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseSummary {
    pub phase: Phase,
    pub steps: usize,
    /// First step included in the correlation.
    pub post_warmup_step: u64,
    /// Correlation of the (chosen) reward and bias series; `None` when undefined.
    pub correlation: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correlation_rejected: Option<f64>,
    pub terminal: Terminal,
}

/// Index of the first record at the peak learning rate, or 0 when no rates are logged.
fn post_warmup_start(records: &[&BiasRecord]) -> usize {
    let peak = records
        .iter()
        .filter_map(|r| r.lr)
        .fold(f64::NEG_INFINITY, f64::max);
    if !peak.is_finite() {
        return 0;
    }
    records.iter().position(|r| r.lr == Some(peak)).unwrap_or(0)
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

fn mean_opt(v: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let all: Option<Vec<f64>> = v.collect();
    all.filter(|a| !a.is_empty()).map(|a| mean(a.into_iter()))
}

fn summarize_phase(phase: Phase, records: &[&BiasRecord], tail: f64) -> PhaseSummary {
    let start = post_warmup_start(records);
    let post = &records[start..];
    let r: Vec<f64> = post.iter().map(|x| x.reward).collect();
    let b: Vec<f64> = post.iter().map(|x| x.bias).collect();
    let rejected = || -> Option<f64> {
        let rr: Option<Vec<f64>> = post.iter().map(|x| x.reward_rejected).collect();
        let br: Option<Vec<f64>> = post.iter().map(|x| x.bias_rejected).collect();
        pearson(&rr?, &br?)
    };
    let window = ((records.len() as f64 * tail).ceil() as usize).clamp(1, records.len());
    let last = &records[records.len() - window..];
    let bias = mean(last.iter().map(|x| x.bias));
    PhaseSummary {
        phase,
        steps: records.len(),
        post_warmup_step: records[start].step,
        correlation: pearson(&r, &b),
        correlation_rejected: if phase == Phase::Dpo {
            rejected()
        } else {
            None
        },
        terminal: Terminal {
            reward: mean(last.iter().map(|x| x.reward)),
            bias,
            abs_bias: bias.abs(),
            reward_rejected: mean_opt(last.iter().map(|x| x.reward_rejected)),
            bias_rejected: mean_opt(last.iter().map(|x| x.bias_rejected)),
            loss: mean_opt(last.iter().map(|x| x.loss.as_ref().map(|l| l.total))),
            vit_loss: mean_opt(
                last.iter()
                    .map(|x| x.loss.as_ref().and_then(|l| l.component(Component::Vit))),
            ),
            window,
        },
    }
}

/// One summary per phase present in `log`, in order of first appearance.
pub fn summarize(log: &[BiasRecord], tail: f64) -> Vec<PhaseSummary> {
    let mut phases: Vec<Phase> = Vec::new();
    for r in log {
        if !phases.contains(&r.phase) {
            phases.push(r.phase);
        }
    }
    phases
        .into_iter()
        .map(|p| {
            let recs: Vec<&BiasRecord> = log.iter().filter(|r| r.phase == p).collect();
            summarize_phase(p, &recs, tail)
        })
        .collect()
}

/// Aligned text table of `summaries`.
pub fn to_table(summaries: &[PhaseSummary]) -> String {
    let fmt = |v: Option<f64>| v.map_or("undefined".to_string(), |x| format!("{x:.4}"));
    let mut out = format!(
        "{:<6}{:>8}{:>12}{:>12}{:>12}{:>12}{:>12}\n",
        "phase", "steps", "corr(R,B)", "R_end", "B_end", "|B|_end", "loss_end"
    );
    for s in summaries {
        out.push_str(&format!(
            "{:<6}{:>8}{:>12}{:>12.4}{:>12.4}{:>12.4}{:>12}\n",
            s.phase.to_string(),
            s.steps,
            fmt(s.correlation),
            s.terminal.reward,
            s.terminal.bias,
            s.terminal.abs_bias,
            fmt(s.terminal.loss)
        ));
    }
    out
}
