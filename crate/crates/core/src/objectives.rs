//! Losses, penalties and diagnostics over sequence log-likelihoods.
//!
//! Every function here is pure. The scalar kernels in [`kernels`] are generic
//! over the working precision; the trace-level wrappers work in `f64` because
//! the reward and bias are differences of long log-likelihood sums.
//!
//! Each total objective also returns its partial derivatives with respect to
//! the *policy* sequence totals ("seeds"). The trainer multiplies those into
//! the model's `∂ total / ∂θ` to get the parameter gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Component, LossBreakdown, Mode, ModelTag, SequenceLogProb};

/// Scalar forms of every loss, generic over precision.
pub mod kernels {
    use crate::scalar::{neg_log_sigmoid, sigmoid, Scalar};

    /// Largest `d` evaluated exactly by [`kl_approx`]; beyond it the exponential is linearised.
    pub const KL_CLAMP: f64 = 50.0;

    /// `exp(d) - d - 1` with a first-order tail past [`KL_CLAMP`].
    pub fn kl_approx<T: Scalar>(d: T) -> T {
        let c = T::lit(KL_CLAMP);
        if d > c {
            c.exp() * (d - c + T::one()) - d - T::one()
        } else {
            // exp_m1 keeps the small-|d| regime accurate.
            d.exp_m1() - d
        }
    }

    /// `d/dd` of [`kl_approx`].
    pub fn kl_approx_grad<T: Scalar>(d: T) -> T {
        let c = T::lit(KL_CLAMP);
        if d > c {
            c.exp() - T::one()
        } else {
            d.exp_m1()
        }
    }

    /// `-log σ(z)` and its derivative `-σ(-z)`.
    pub fn nls_with_grad<T: Scalar>(z: T) -> (T, T) {
        (neg_log_sigmoid(z), -sigmoid(-z))
    }

    pub fn dpo<T: Scalar>(beta: T, ratio_chosen: T, ratio_rejected: T) -> T {
        neg_log_sigmoid(beta * (ratio_chosen - ratio_rejected))
    }

    pub fn margin<T: Scalar>(beta: T, ratio_chosen: T) -> T {
        neg_log_sigmoid(beta * ratio_chosen)
    }

    /// `-log σ(β · (log π_ref − log π_θ)) = -log σ(-β·bias)`.
    pub fn lbp<T: Scalar>(beta: T, bias: T) -> T {
        neg_log_sigmoid(-beta * bias)
    }

    pub fn contrastive<T: Scalar>(reward: T, bias: T) -> T {
        neg_log_sigmoid(reward - bias)
    }

    /// `|bias| / n`. Only needs exact field arithmetic, so it also runs over rationals.
    pub fn l1_mean<T: num_traits::Signed + num_traits::FromPrimitive>(bias: T, n: usize) -> T {
        bias.abs() / T::from_usize(n).expect("length fits the scalar")
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum LbrVariant {
    /// `|B|` over the whole sequence.
    #[default]
    L1,
    /// `|B| / |y|`.
    L1Mean,
    /// `exp(d) - d - 1` with `d = -B`.
    KlApprox,
    /// `-log σ(R - B)`.
    Contrastive,
}

impl LbrVariant {
    pub const ALL: [LbrVariant; 4] = [
        LbrVariant::L1,
        LbrVariant::L1Mean,
        LbrVariant::KlApprox,
        LbrVariant::Contrastive,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LbrVariant::L1 => "l1",
            LbrVariant::L1Mean => "l1-mean",
            LbrVariant::KlApprox => "kl-approx",
            LbrVariant::Contrastive => "contrastive",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum LbpTarget {
    #[default]
    ChosenOnly,
    RejectedOnly,
    Both,
}

/// Which algebraic form of the bias penalty to evaluate.
///
/// `Expanded` is `-log σ(-β·B)`, which pushes `B` negative. `Compact` is the
/// literal `-log σ(B)` and exists only for side-by-side diagnostics.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum LbpForm {
    #[default]
    Expanded,
    Compact,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObjectiveConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub beta: f64,
    pub lbr_variant: LbrVariant,
    pub lbp_target: LbpTarget,
    /// Include the chosen-response margin term in the DPO phase.
    pub margin: bool,
    pub lbp_form: LbpForm,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            alpha: 0.0,
            gamma: 0.0,
            beta: 0.1,
            lbr_variant: LbrVariant::L1,
            lbp_target: LbpTarget::ChosenOnly,
            margin: true,
            lbp_form: LbpForm::Expanded,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::invalid("beta must be positive"));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid("alpha must be non-negative"));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::invalid("gamma must be non-negative"));
        }
        Ok(())
    }
}

fn expect(lp: &SequenceLogProb, mode: Mode, tag: ModelTag) -> Result<()> {
    if lp.mode() != mode {
        return Err(Error::ModeMismatch {
            expected: mode.to_string(),
            got: lp.mode().to_string(),
        });
    }
    if lp.model_tag() != tag {
        return Err(Error::InconsistentTraces(format!(
            "expected a {tag} trace, got {}",
            lp.model_tag()
        )));
    }
    Ok(())
}

fn same_len(a: &SequenceLogProb, b: &SequenceLogProb) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::InconsistentTraces(format!(
            "traces cover {} and {} tokens",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// Negative log-likelihood of the response under full conditioning.
pub fn vit_loss(policy_mm: &SequenceLogProb) -> Result<f64> {
    expect(policy_mm, Mode::Multimodal, ModelTag::Policy)?;
    Ok(-policy_mm.total())
}

/// `log π_θ(y|x) − log π_ref(y|x)`.
pub fn language_bias(policy_text: &SequenceLogProb, ref_text: &SequenceLogProb) -> Result<f64> {
    expect(policy_text, Mode::TextOnly, ModelTag::Policy)?;
    expect(ref_text, Mode::TextOnly, ModelTag::Reference)?;
    same_len(policy_text, ref_text)?;
    Ok(policy_text.total() - ref_text.total())
}

/// `log π_θ(y|x,v) − log π_ref(y|x,v)`.
pub fn reward(policy_mm: &SequenceLogProb, ref_mm: &SequenceLogProb) -> Result<f64> {
    expect(policy_mm, Mode::Multimodal, ModelTag::Policy)?;
    expect(ref_mm, Mode::Multimodal, ModelTag::Reference)?;
    same_len(policy_mm, ref_mm)?;
    Ok(policy_mm.total() - ref_mm.total())
}

pub fn lbr_l1(bias: f64) -> f64 {
    bias.abs()
}

pub fn lbr_l1_mean(bias: f64, response_len: usize) -> Result<f64> {
    if response_len == 0 {
        return Err(Error::invalid("response length must be at least 1"));
    }
    Ok(kernels::l1_mean(bias, response_len))
}

pub fn lbr_kl_approx(policy_text: &SequenceLogProb, ref_text: &SequenceLogProb) -> Result<f64> {
    let b = language_bias(policy_text, ref_text)?;
    Ok(kernels::kl_approx(-b))
}

pub fn lbr_contrastive(
    policy_mm: &SequenceLogProb,
    ref_mm: &SequenceLogProb,
    policy_text: &SequenceLogProb,
    ref_text: &SequenceLogProb,
) -> Result<f64> {
    let r = reward(policy_mm, ref_mm)?;
    let b = language_bias(policy_text, ref_text)?;
    Ok(kernels::contrastive(r, b))
}

pub fn dpo_loss(
    policy_w_mm: &SequenceLogProb,
    ref_w_mm: &SequenceLogProb,
    policy_l_mm: &SequenceLogProb,
    ref_l_mm: &SequenceLogProb,
    beta: f64,
) -> Result<f64> {
    let rw = reward(policy_w_mm, ref_w_mm)?;
    let rl = reward(policy_l_mm, ref_l_mm)?;
    Ok(kernels::dpo(beta, rw, rl))
}

pub fn margin_loss(
    policy_w_mm: &SequenceLogProb,
    ref_w_mm: &SequenceLogProb,
    beta: f64,
) -> Result<f64> {
    Ok(kernels::margin(beta, reward(policy_w_mm, ref_w_mm)?))
}

pub fn lbp_penalty(
    policy_text: &SequenceLogProb,
    ref_text: &SequenceLogProb,
    beta: f64,
) -> Result<f64> {
    Ok(kernels::lbp(beta, language_bias(policy_text, ref_text)?))
}

/// The four traces for one VIT example.
#[derive(Clone, Copy, Debug)]
pub struct VitTraces<'a> {
    pub policy_mm: &'a SequenceLogProb,
    pub ref_mm: &'a SequenceLogProb,
    pub policy_text: &'a SequenceLogProb,
    pub ref_text: &'a SequenceLogProb,
}

/// `∂ total / ∂` policy totals for one VIT example.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct VitSeeds {
    pub policy_mm: f64,
    pub policy_text: f64,
}

#[derive(Clone, Debug)]
pub struct VitEval {
    pub loss: LossBreakdown,
    pub seeds: VitSeeds,
    pub reward: f64,
    pub bias: f64,
}

/// `L_VIT + α · L_LBR` for one example, with the regulariser picked by `cfg.lbr_variant`.
pub fn vit_total(t: VitTraces<'_>, cfg: &ObjectiveConfig) -> Result<VitEval> {
    let vit = vit_loss(t.policy_mm)?;
    let r = reward(t.policy_mm, t.ref_mm)?;
    let b = language_bias(t.policy_text, t.ref_text)?;
    same_len(t.policy_mm, t.policy_text)?;
    let n = t.policy_text.len();

    // (value, ∂/∂R, ∂/∂B); R and B move one-for-one with the policy totals.
    let (lbr, d_r, d_b) = match cfg.lbr_variant {
        LbrVariant::L1 => (lbr_l1(b), 0.0, sign(b)),
        LbrVariant::L1Mean => (lbr_l1_mean(b, n)?, 0.0, sign(b) / n as f64),
        LbrVariant::KlApprox => (kernels::kl_approx(-b), 0.0, -kernels::kl_approx_grad(-b)),
        LbrVariant::Contrastive => {
            let (v, g) = kernels::nls_with_grad(r - b);
            (v, g, -g)
        }
    };
    let a = cfg.alpha;
    Ok(VitEval {
        loss: LossBreakdown::from_terms(&[(Component::Vit, vit, 1.0), (Component::Lbr, lbr, a)]),
        seeds: VitSeeds {
            policy_mm: -1.0 + a * d_r,
            policy_text: a * d_b,
        },
        reward: r,
        bias: b,
    })
}

/// Subgradient of `|x|`, zero at the kink.
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// The eight traces for one preference pair.
#[derive(Clone, Copy, Debug)]
pub struct DpoTraces<'a> {
    pub policy_w_mm: &'a SequenceLogProb,
    pub ref_w_mm: &'a SequenceLogProb,
    pub policy_l_mm: &'a SequenceLogProb,
    pub ref_l_mm: &'a SequenceLogProb,
    pub policy_w_text: &'a SequenceLogProb,
    pub ref_w_text: &'a SequenceLogProb,
    pub policy_l_text: &'a SequenceLogProb,
    pub ref_l_text: &'a SequenceLogProb,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DpoSeeds {
    pub chosen_mm: f64,
    pub rejected_mm: f64,
    pub chosen_text: f64,
    pub rejected_text: f64,
}

#[derive(Clone, Debug)]
pub struct DpoEval {
    pub loss: LossBreakdown,
    pub seeds: DpoSeeds,
    pub reward_chosen: f64,
    pub bias_chosen: f64,
    pub reward_rejected: f64,
    pub bias_rejected: f64,
}

/// `L_DPO + L_Margin` with zero-weight bias terms; see [`dpo_total`].
pub fn dpo_m(t: DpoTraces<'_>, beta: f64) -> Result<DpoEval> {
    let cfg = ObjectiveConfig {
        beta,
        gamma: 0.0,
        margin: true,
        ..ObjectiveConfig::default()
    };
    dpo_total(t, &cfg)
}

/// Bias penalty value and `∂/∂B` for the configured form.
fn lbp_with_grad(form: LbpForm, beta: f64, b: f64) -> (f64, f64) {
    match form {
        LbpForm::Expanded => {
            let (v, g) = kernels::nls_with_grad(-beta * b);
            (v, -beta * g)
        }
        LbpForm::Compact => kernels::nls_with_grad(b),
    }
}

/// `L_DPO_M + γ · L_LBP`; the penalty covers the responses picked by `cfg.lbp_target`.
pub fn dpo_total(t: DpoTraces<'_>, cfg: &ObjectiveConfig) -> Result<DpoEval> {
    cfg.validate()?;
    let beta = cfg.beta;
    let rw = reward(t.policy_w_mm, t.ref_w_mm)?;
    let rl = reward(t.policy_l_mm, t.ref_l_mm)?;
    let bw = language_bias(t.policy_w_text, t.ref_w_text)?;
    let bl = language_bias(t.policy_l_text, t.ref_l_text)?;
    same_len(t.policy_w_mm, t.policy_w_text)?;
    same_len(t.policy_l_mm, t.policy_l_text)?;

    let (dpo, g_dpo) = kernels::nls_with_grad(beta * (rw - rl));
    let (margin, g_margin) = kernels::nls_with_grad(beta * rw);
    let margin_w = if cfg.margin { 1.0 } else { 0.0 };

    let (lbp_w, g_lbp_w) = lbp_with_grad(cfg.lbp_form, beta, bw);
    let (lbp_l, g_lbp_l) = lbp_with_grad(cfg.lbp_form, beta, bl);
    let (use_w, use_l) = match cfg.lbp_target {
        LbpTarget::ChosenOnly => (1.0, 0.0),
        LbpTarget::RejectedOnly => (0.0, 1.0),
        LbpTarget::Both => (1.0, 1.0),
    };
    let lbp = use_w * lbp_w + use_l * lbp_l;
    let gamma = cfg.gamma;

    Ok(DpoEval {
        loss: LossBreakdown::from_terms(&[
            (Component::Dpo, dpo, 1.0),
            (Component::Margin, margin, margin_w),
            (Component::Lbp, lbp, gamma),
        ]),
        seeds: DpoSeeds {
            chosen_mm: beta * g_dpo + margin_w * beta * g_margin,
            rejected_mm: -beta * g_dpo,
            chosen_text: gamma * use_w * g_lbp_w,
            rejected_text: gamma * use_l * g_lbp_l,
        },
        reward_chosen: rw,
        bias_chosen: bw,
        reward_rejected: rl,
        bias_rejected: bl,
    })
}
