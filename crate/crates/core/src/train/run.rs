use rand::seq::SliceRandom;

use super::config::TrainConfig;
use super::optim::AdamW;
use super::schedule::{alpha_at, lr_at, warmup_steps};
use super::step::{dpo_batch, vit_batch, BatchStats};
use crate::error::{Error, Result};
use crate::model::{Model, ParamSnapshot};
use crate::refcache::ReferenceSource;
use crate::rng::rng_stream;
use crate::types::{BiasRecord, MultimodalExample, Phase, PreferencePair};

pub struct TrainOutcome {
    pub model: Model<f32>,
    pub snapshot: ParamSnapshot,
    pub log: Vec<BiasRecord>,
}

/// Shuffled mini-batches of record indices for every epoch, in step order.
fn batch_plan(cfg: &TrainConfig, n: usize) -> Vec<Vec<usize>> {
    let mut plan = Vec::new();
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng_stream(cfg.seed, &format!("shuffle/{epoch}")));
        plan.extend(order.chunks(cfg.batch_size).map(<[usize]>::to_vec));
    }
    plan
}

fn run<R: Sync>(
    cfg: &TrainConfig,
    phase: Phase,
    records: &[R],
    init: &ParamSnapshot,
    reference: &dyn ReferenceSource,
    eval: impl Fn(&Model<f32>, &[&R], f64) -> Result<(BatchStats, Option<Vec<f32>>)>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.phase != phase {
        return Err(Error::invalid(format!(
            "config is for the {} phase, not {phase}",
            cfg.phase
        )));
    }
    if records.is_empty() {
        return Err(Error::invalid("training corpus is empty"));
    }
    if reference.snapshot_hash() != init.hash() {
        return Err(Error::HashMismatch {
            expected: init.hash().to_string(),
            found: reference.snapshot_hash().to_string(),
        });
    }
    let mut model: Model<f32> = init.restore(None)?;
    let mut opt = AdamW::new(cfg.adam(), model.n_params());
    let plan = batch_plan(cfg, records.len());
    let total = plan.len() as u64;
    let warmup = warmup_steps(cfg.warmup_ratio, total);
    let limit = cfg.max_steps.map_or(total, |m| m.min(total));
    let mut log = Vec::with_capacity(limit as usize);

    for (step, idx) in plan.iter().enumerate().take(limit as usize) {
        let step = step as u64;
        let alpha = match phase {
            Phase::Vit => alpha_at(&cfg.alpha_schedule, step, total)?,
            Phase::Dpo => 0.0,
        };
        let lr = lr_at(cfg.learning_rate, warmup, step, total);
        let batch: Vec<&R> = idx.iter().map(|&i| &records[i]).collect();
        let (stats, grad) = eval(&model, &batch, alpha).map_err(|e| match e {
            Error::NonFinite { what, .. } => Error::NonFinite { step, what },
            other => other,
        })?;
        if !stats.loss.total.is_finite() {
            return Err(Error::NonFinite {
                step,
                what: "loss".into(),
            });
        }
        opt.step(model.params_mut(), &grad.expect("gradient requested"), lr)
            .map_err(|e| match e {
                Error::NonFinite { what, .. } => Error::NonFinite { step, what },
                other => other,
            })?;
        log.push(BiasRecord {
            step,
            phase,
            reward: stats.reward,
            bias: stats.bias,
            reward_rejected: stats.reward_rejected,
            bias_rejected: stats.bias_rejected,
            alpha,
            gamma: match phase {
                Phase::Vit => 0.0,
                Phase::Dpo => cfg.objective.gamma,
            },
            lr: Some(lr),
            loss: Some(stats.loss),
        });
    }
    let snapshot = ParamSnapshot::capture(&model);
    Ok(TrainOutcome {
        model,
        snapshot,
        log,
    })
}

/// Instruction tuning with the optional bias regulariser, starting from `init`.
pub fn train_vit(
    cfg: &TrainConfig,
    examples: &[MultimodalExample],
    init: &ParamSnapshot,
    reference: &dyn ReferenceSource,
) -> Result<TrainOutcome> {
    run(
        cfg,
        Phase::Vit,
        examples,
        init,
        reference,
        |model, batch, alpha| {
            let obj = crate::objectives::ObjectiveConfig {
                alpha,
                ..cfg.objective.clone()
            };
            vit_batch(model, batch, reference, &obj, true)
        },
    )
}

/// Preference optimisation with the optional bias penalty, starting from `init`.
pub fn train_dpo(
    cfg: &TrainConfig,
    pairs: &[PreferencePair],
    init: &ParamSnapshot,
    reference: &dyn ReferenceSource,
) -> Result<TrainOutcome> {
    run(
        cfg,
        Phase::Dpo,
        pairs,
        init,
        reference,
        |model, batch, _| dpo_batch(model, batch, reference, &cfg.objective, true),
    )
}
