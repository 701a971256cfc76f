//! Central finite-difference verification of the analytic objective gradients.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::step::{dpo_batch, vit_batch};
use crate::error::Result;
use crate::model::Model;
use crate::objectives::{LbpTarget, LbrVariant, ObjectiveConfig};
use crate::refcache::ReferenceSource;
use crate::rng::rng_stream;
use crate::types::{MultimodalExample, PreferencePair};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckSpec {
    /// Coordinates drawn uniformly, plus as many again from those with a nonzero analytic gradient.
    pub coords: usize,
    pub h: f64,
    pub tolerance: f64,
    /// Denominator floor for the relative error.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckSpec {
    fn default() -> Self {
        GradCheckSpec {
            coords: 20,
            h: 1e-4,
            tolerance: 1e-4,
            floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub objective: String,
    pub coords_checked: usize,
    pub max_rel_err: f64,
    pub worst_coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub spec: GradCheckSpec,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.max_rel_err)
            .fold(0.0, f64::max)
    }
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// The instruction-tuning objectives: plain, then with each regulariser at weight `alpha`.
pub fn vit_variants(alpha: f64) -> Vec<(String, ObjectiveConfig)> {
    let mut out = vec![("vit".to_string(), ObjectiveConfig::default())];
    for v in LbrVariant::ALL {
        out.push((
            format!("vit+lbr-{}", v.as_str()),
            ObjectiveConfig {
                alpha,
                lbr_variant: v,
                ..ObjectiveConfig::default()
            },
        ));
    }
    out
}

/// The preference objectives: DPO, DPO with margin, then the penalty on each target at weight `gamma`.
pub fn dpo_variants(beta: f64, gamma: f64) -> Vec<(String, ObjectiveConfig)> {
    let base = ObjectiveConfig {
        beta,
        margin: false,
        ..ObjectiveConfig::default()
    };
    let mut out = vec![
        ("dpo".to_string(), base.clone()),
        (
            "dpo_m".to_string(),
            ObjectiveConfig {
                margin: true,
                ..base.clone()
            },
        ),
    ];
    for (name, target) in [
        ("chosen", LbpTarget::ChosenOnly),
        ("rejected", LbpTarget::RejectedOnly),
        ("both", LbpTarget::Both),
    ] {
        out.push((
            format!("dpo_m+lbp-{name}"),
            ObjectiveConfig {
                margin: true,
                gamma,
                lbp_target: target,
                ..base.clone()
            },
        ));
    }
    out
}

/// Mean loss at a policy, with its gradient when requested.
type LossFn<'a> = dyn Fn(&Model<f64>, bool) -> Result<(f64, Option<Vec<f64>>)> + 'a;

fn check_one(
    name: &str,
    policy: &Model<f64>,
    spec: &GradCheckSpec,
    eval: &LossFn<'_>,
) -> Result<GradCheckEntry> {
    let (_, grad) = eval(policy, true)?;
    let grad = grad.expect("gradient requested");
    let n = grad.len();
    let mut rng = rng_stream(spec.seed, &format!("grad-check/{name}"));
    let mut coords: Vec<usize> = sample(&mut rng, n, spec.coords.min(n)).into_vec();
    let active: Vec<usize> = (0..n).filter(|&i| grad[i] != 0.0).collect();
    coords.extend(
        sample(&mut rng, active.len(), spec.coords.min(active.len()))
            .into_iter()
            .map(|k| active[k]),
    );

    let mut probe = policy.clone();
    let mut worst = GradCheckEntry {
        objective: name.to_string(),
        coords_checked: coords.len(),
        max_rel_err: 0.0,
        worst_coord: coords.first().copied().unwrap_or(0),
        analytic: 0.0,
        numeric: 0.0,
        passed: true,
    };
    for &i in &coords {
        let x = probe.params()[i];
        probe.params_mut()[i] = x + spec.h;
        let up = eval(&probe, false)?.0;
        probe.params_mut()[i] = x - spec.h;
        let down = eval(&probe, false)?.0;
        probe.params_mut()[i] = x;
        let numeric = (up - down) / (2.0 * spec.h);
        let err = relative_error(grad[i], numeric, spec.floor);
        if err > worst.max_rel_err || err.is_nan() {
            worst.max_rel_err = err;
            worst.worst_coord = i;
            worst.analytic = grad[i];
            worst.numeric = numeric;
        }
    }
    worst.passed = worst.max_rel_err < spec.tolerance;
    Ok(worst)
}

/// Checks every objective in `variants` on the mean loss over `examples`.
pub fn grad_check_vit(
    policy: &Model<f64>,
    reference: &dyn ReferenceSource,
    examples: &[&MultimodalExample],
    variants: &[(String, ObjectiveConfig)],
    spec: &GradCheckSpec,
) -> Result<GradCheckReport> {
    let entries = variants
        .iter()
        .map(|(name, obj)| {
            check_one(name, policy, spec, &|m, g| {
                let (s, grad) = vit_batch(m, examples, reference, obj, g)?;
                Ok((s.loss.total, grad))
            })
        })
        .collect::<Result<_>>()?;
    Ok(GradCheckReport {
        spec: *spec,
        entries,
    })
}

/// Checks every objective in `variants` on the mean loss over `pairs`.
pub fn grad_check_dpo(
    policy: &Model<f64>,
    reference: &dyn ReferenceSource,
    pairs: &[&PreferencePair],
    variants: &[(String, ObjectiveConfig)],
    spec: &GradCheckSpec,
) -> Result<GradCheckReport> {
    let entries = variants
        .iter()
        .map(|(name, obj)| {
            check_one(name, policy, spec, &|m, g| {
                let (s, grad) = dpo_batch(m, pairs, reference, obj, g)?;
                Ok((s.loss.total, grad))
            })
        })
        .collect::<Result<_>>()?;
    Ok(GradCheckReport {
        spec: *spec,
        entries,
    })
}
