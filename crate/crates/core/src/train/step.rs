//! Batch-level objective evaluation shared by the training loops and the gradient check.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::objectives::{dpo_total, vit_total, DpoTraces, LbpTarget, ObjectiveConfig, VitTraces};
use crate::refcache::{ReferenceSource, Role};
use crate::scalar::Scalar;
use crate::types::{
    LossBreakdown, MultimodalExample, PreferencePair, SequenceLogProb, TokenSeq, VisualContext,
};

/// Batch means of everything logged per step.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub loss: LossBreakdown,
    pub reward: f64,
    pub bias: f64,
    pub reward_rejected: Option<f64>,
    pub bias_rejected: Option<f64>,
}

struct ExampleOut<T> {
    loss: LossBreakdown,
    reward: f64,
    bias: f64,
    rejected: Option<(f64, f64)>,
    grad: Option<Vec<T>>,
}

fn policy_trace<T: Scalar>(
    model: &Model<T>,
    visual: Option<&VisualContext>,
    instruction: &TokenSeq,
    response: &TokenSeq,
    want_grad: bool,
) -> Result<(SequenceLogProb, Option<Vec<T>>)> {
    if want_grad {
        let (lp, g) = model.score_gradient(visual, instruction, response)?;
        Ok((lp, Some(g)))
    } else {
        Ok((model.score_sequence(visual, instruction, response)?, None))
    }
}

/// `Σ seed_i · g_i` over the traces that carry a gradient.
fn combine<T: Scalar>(n: usize, parts: &[(f64, &Option<Vec<T>>)]) -> Vec<T> {
    let mut out = vec![T::zero(); n];
    for (seed, g) in parts {
        if let Some(g) = g {
            if *seed == 0.0 {
                continue;
            }
            let s = T::lit(*seed);
            for (o, &x) in out.iter_mut().zip(g) {
                *o += s * x;
            }
        }
    }
    out
}

fn vit_example<T: Scalar>(
    model: &Model<T>,
    ex: &MultimodalExample,
    reference: &dyn ReferenceSource,
    obj: &ObjectiveConfig,
    want_grad: bool,
) -> Result<ExampleOut<T>> {
    let v = Some(&ex.visual);
    let (p_mm, g_mm) = policy_trace(model, v, &ex.instruction, &ex.response, want_grad)?;
    let (p_text, g_text) = policy_trace(
        model,
        None,
        &ex.instruction,
        &ex.response,
        want_grad && obj.alpha > 0.0,
    )?;
    let r_mm = reference.trace(
        &ex.example_id,
        Role::Response,
        v,
        &ex.instruction,
        &ex.response,
    )?;
    let r_text = reference.trace(
        &ex.example_id,
        Role::Response,
        None,
        &ex.instruction,
        &ex.response,
    )?;
    let ev = vit_total(
        VitTraces {
            policy_mm: &p_mm,
            ref_mm: &r_mm,
            policy_text: &p_text,
            ref_text: &r_text,
        },
        obj,
    )?;
    // Seeds are ∂loss/∂total, so the weighted sum is ∂loss/∂θ.
    let grad = want_grad.then(|| {
        combine(
            model.n_params(),
            &[(ev.seeds.policy_mm, &g_mm), (ev.seeds.policy_text, &g_text)],
        )
    });
    Ok(ExampleOut {
        loss: ev.loss,
        reward: ev.reward,
        bias: ev.bias,
        rejected: None,
        grad,
    })
}

fn dpo_example<T: Scalar>(
    model: &Model<T>,
    pair: &PreferencePair,
    reference: &dyn ReferenceSource,
    obj: &ObjectiveConfig,
    want_grad: bool,
) -> Result<ExampleOut<T>> {
    let v = Some(&pair.visual);
    let x = &pair.instruction;
    let id = pair.pair_id.as_str();
    let penalised = want_grad && obj.gamma > 0.0;
    let (text_w, text_l) = match obj.lbp_target {
        LbpTarget::ChosenOnly => (penalised, false),
        LbpTarget::RejectedOnly => (false, penalised),
        LbpTarget::Both => (penalised, penalised),
    };
    let (pw_mm, gw_mm) = policy_trace(model, v, x, &pair.chosen, want_grad)?;
    let (pl_mm, gl_mm) = policy_trace(model, v, x, &pair.rejected, want_grad)?;
    let (pw_text, gw_text) = policy_trace(model, None, x, &pair.chosen, text_w)?;
    let (pl_text, gl_text) = policy_trace(model, None, x, &pair.rejected, text_l)?;
    let rw_mm = reference.trace(id, Role::Chosen, v, x, &pair.chosen)?;
    let rl_mm = reference.trace(id, Role::Rejected, v, x, &pair.rejected)?;
    let rw_text = reference.trace(id, Role::Chosen, None, x, &pair.chosen)?;
    let rl_text = reference.trace(id, Role::Rejected, None, x, &pair.rejected)?;
    let ev = dpo_total(
        DpoTraces {
            policy_w_mm: &pw_mm,
            ref_w_mm: &rw_mm,
            policy_l_mm: &pl_mm,
            ref_l_mm: &rl_mm,
            policy_w_text: &pw_text,
            ref_w_text: &rw_text,
            policy_l_text: &pl_text,
            ref_l_text: &rl_text,
        },
        obj,
    )?;
    let s = ev.seeds;
    let grad = want_grad.then(|| {
        combine(
            model.n_params(),
            &[
                (s.chosen_mm, &gw_mm),
                (s.rejected_mm, &gl_mm),
                (s.chosen_text, &gw_text),
                (s.rejected_text, &gl_text),
            ],
        )
    });
    Ok(ExampleOut {
        loss: ev.loss,
        reward: ev.reward_chosen,
        bias: ev.bias_chosen,
        rejected: Some((ev.reward_rejected, ev.bias_rejected)),
        grad,
    })
}

fn reduce<T: Scalar>(
    outs: Vec<ExampleOut<T>>,
    n_params: usize,
    want_grad: bool,
) -> Result<(BatchStats, Option<Vec<T>>)> {
    if outs.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let n = outs.len() as f64;
    let losses: Vec<LossBreakdown> = outs.iter().map(|o| o.loss.clone()).collect();
    let mean = |f: &dyn Fn(&ExampleOut<T>) -> f64| outs.iter().map(f).sum::<f64>() / n;
    let rejected = outs[0].rejected.is_some();
    let stats = BatchStats {
        loss: LossBreakdown::mean(&losses).expect("non-empty"),
        reward: mean(&|o| o.reward),
        bias: mean(&|o| o.bias),
        reward_rejected: rejected.then(|| mean(&|o| o.rejected.map_or(0.0, |r| r.0))),
        bias_rejected: rejected.then(|| mean(&|o| o.rejected.map_or(0.0, |r| r.1))),
    };
    let grad = want_grad.then(|| {
        // Fixed summation order keeps the result independent of the thread count.
        let mut g = vec![T::zero(); n_params];
        for o in &outs {
            for (a, &b) in g.iter_mut().zip(o.grad.as_ref().expect("requested")) {
                *a += b;
            }
        }
        let inv = T::lit(1.0 / n);
        g.iter_mut().for_each(|x| *x *= inv);
        g
    });
    Ok((stats, grad))
}

/// Mean VIT objective over `batch` and, if requested, its gradient.
pub fn vit_batch<T: Scalar>(
    model: &Model<T>,
    batch: &[&MultimodalExample],
    reference: &dyn ReferenceSource,
    obj: &ObjectiveConfig,
    want_grad: bool,
) -> Result<(BatchStats, Option<Vec<T>>)> {
    let outs = batch
        .par_iter()
        .map(|ex| vit_example(model, ex, reference, obj, want_grad))
        .collect::<Result<Vec<_>>>()?;
    reduce(outs, model.n_params(), want_grad)
}

/// Mean DPO-phase objective over `batch` and, if requested, its gradient.
pub fn dpo_batch<T: Scalar>(
    model: &Model<T>,
    batch: &[&PreferencePair],
    reference: &dyn ReferenceSource,
    obj: &ObjectiveConfig,
    want_grad: bool,
) -> Result<(BatchStats, Option<Vec<T>>)> {
    let outs = batch
        .par_iter()
        .map(|p| dpo_example(model, p, reference, obj, want_grad))
        .collect::<Result<Vec<_>>>()?;
    reduce(outs, model.n_params(), want_grad)
}
