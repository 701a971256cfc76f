//! Domain values shared by every stage of the pipeline.
//!
//! Everything here is immutable after construction; constructors check the
//! invariants so downstream code can rely on them.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

/// Token ids over a fixed vocabulary.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSeq {
    pub ids: Vec<TokenId>,
    pub vocab_size: u32,
}

impl TokenSeq {
    pub fn new(ids: Vec<TokenId>, vocab_size: u32) -> Result<Self> {
        let seq = TokenSeq { ids, vocab_size };
        seq.validate()?;
        Ok(seq)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 {
            return Err(Error::invalid("vocab_size must be positive"));
        }
        if let Some(bad) = self.ids.iter().find(|&&t| t >= self.vocab_size) {
            return Err(Error::invalid(format!(
                "token id {bad} outside vocabulary of size {}",
                self.vocab_size
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Pre-extracted visual tokens: `m` rows of `d_v` features each.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisualContext {
    pub image_id: String,
    pub features: Vec<Vec<f64>>,
}

impl VisualContext {
    pub fn new(image_id: impl Into<String>, features: Vec<Vec<f64>>) -> Result<Self> {
        let v = VisualContext {
            image_id: image_id.into(),
            features,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.features.first() else {
            return Err(Error::invalid("visual context needs at least one token"));
        };
        let d = first.len();
        if d == 0 {
            return Err(Error::invalid("visual feature dimension must be positive"));
        }
        for row in &self.features {
            if row.len() != d {
                return Err(Error::invalid("ragged visual feature matrix"));
            }
            if row.iter().any(|x| !x.is_finite()) {
                return Err(Error::invalid("non-finite visual feature"));
            }
        }
        Ok(())
    }

    pub fn n_tokens(&self) -> usize {
        self.features.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TaxonomyCategory {
    Existence,
    Attribute,
    State,
    Number,
    Action,
    Relation,
}

impl TaxonomyCategory {
    pub const ALL: [TaxonomyCategory; 6] = [
        TaxonomyCategory::Existence,
        TaxonomyCategory::Attribute,
        TaxonomyCategory::State,
        TaxonomyCategory::Number,
        TaxonomyCategory::Action,
        TaxonomyCategory::Relation,
    ];

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown taxonomy category {s:?}")))
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TaxonomyCategory::Existence => "Existence",
            TaxonomyCategory::Attribute => "Attribute",
            TaxonomyCategory::State => "State",
            TaxonomyCategory::Number => "Number",
            TaxonomyCategory::Action => "Action",
            TaxonomyCategory::Relation => "Relation",
        }
    }
}

impl fmt::Display for TaxonomyCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaxonomyLabel {
    pub category: TaxonomyCategory,
    pub count: u32,
}

fn check_unique_categories(labels: &[TaxonomyLabel]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for l in labels {
        if !seen.insert(l.category) {
            return Err(Error::invalid(format!(
                "taxonomy category {} repeated",
                l.category
            )));
        }
    }
    Ok(())
}

/// One (image, instruction, response) training triple with its object annotations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultimodalExample {
    pub example_id: String,
    #[serde(flatten)]
    pub visual: VisualContext,
    pub instruction: TokenSeq,
    pub response: TokenSeq,
    pub gt_objects: BTreeSet<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotations: Option<Vec<TaxonomyLabel>>,
}

impl MultimodalExample {
    pub fn validate(&self) -> Result<()> {
        self.visual.validate()?;
        self.instruction.validate()?;
        self.response.validate()?;
        if self.response.is_empty() {
            return Err(Error::invalid(format!(
                "example {}: empty response",
                self.example_id
            )));
        }
        if let Some(a) = &self.annotations {
            check_unique_categories(a)?;
        }
        Ok(())
    }
}

/// A single injected error in a rejected response, as generated.
///
/// `phantom` marks corruptions whose target object is absent from the scene
/// (it was introduced by an earlier `Existence` corruption).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corruption {
    pub category: TaxonomyCategory,
    pub object: String,
    #[serde(default)]
    pub phantom: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub pair_id: String,
    #[serde(flatten)]
    pub visual: VisualContext,
    pub instruction: TokenSeq,
    pub chosen: TokenSeq,
    pub rejected: TokenSeq,
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub gt_objects: BTreeSet<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub annotations: Vec<TaxonomyLabel>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub corruptions: Vec<Corruption>,
}

impl PreferencePair {
    pub fn validate(&self) -> Result<()> {
        self.visual.validate()?;
        self.instruction.validate()?;
        self.chosen.validate()?;
        self.rejected.validate()?;
        if self.chosen.is_empty() || self.rejected.is_empty() {
            return Err(Error::invalid(format!(
                "pair {}: empty response",
                self.pair_id
            )));
        }
        if self.chosen.ids == self.rejected.ids {
            return Err(Error::invalid(format!(
                "pair {}: chosen and rejected are identical",
                self.pair_id
            )));
        }
        check_unique_categories(&self.annotations)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Mode {
    Multimodal,
    TextOnly,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Multimodal => "Multimodal",
            Mode::TextOnly => "TextOnly",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelTag {
    Policy,
    Reference,
}

impl fmt::Display for ModelTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelTag::Policy => "Policy",
            ModelTag::Reference => "Reference",
        })
    }
}

/// Per-token log-likelihood of one response under one model and conditioning mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawLogProb")]
pub struct SequenceLogProb {
    per_token: Vec<f64>,
    total: f64,
    mode: Mode,
    model_tag: ModelTag,
}

#[derive(Deserialize)]
struct RawLogProb {
    per_token: Vec<f64>,
    total: f64,
    mode: Mode,
    model_tag: ModelTag,
}

impl TryFrom<RawLogProb> for SequenceLogProb {
    type Error = Error;

    fn try_from(r: RawLogProb) -> Result<Self> {
        SequenceLogProb::with_total(r.per_token, r.total, r.mode, r.model_tag)
    }
}

/// Left-to-right double-precision sum; every producer uses this one order.
pub fn exact_sum(values: &[f64]) -> f64 {
    values.iter().fold(0.0, |acc, v| acc + v)
}

impl SequenceLogProb {
    pub fn new(per_token: Vec<f64>, mode: Mode, model_tag: ModelTag) -> Result<Self> {
        let total = exact_sum(&per_token);
        Self::with_total(per_token, total, mode, model_tag)
    }

    /// Builds from a stored total, checking it against the per-token sum.
    pub fn with_total(
        per_token: Vec<f64>,
        total: f64,
        mode: Mode,
        model_tag: ModelTag,
    ) -> Result<Self> {
        if let Some(bad) = per_token.iter().find(|v| !(**v <= 0.0)) {
            return Err(Error::invalid(format!(
                "per-token log-prob {bad} is not <= 0"
            )));
        }
        let sum = exact_sum(&per_token);
        if !total.is_finite() || (sum - total).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "total {total} disagrees with per-token sum {sum}"
            )));
        }
        Ok(SequenceLogProb {
            per_token,
            total,
            mode,
            model_tag,
        })
    }

    pub fn per_token(&self) -> &[f64] {
        &self.per_token
    }

    pub fn total(&self) -> f64 {
        self.total
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn model_tag(&self) -> ModelTag {
        self.model_tag
    }

    pub fn len(&self) -> usize {
        self.per_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_token.is_empty()
    }

    pub fn retagged(&self, tag: ModelTag) -> Self {
        SequenceLogProb {
            model_tag: tag,
            ..self.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    #[serde(rename = "VIT")]
    Vit,
    #[serde(rename = "DPO")]
    Dpo,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Vit => "VIT",
            Phase::Dpo => "DPO",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    Vit,
    Dpo,
    Margin,
    Lbr,
    Lbp,
}

/// Named loss terms with their weights and the weighted total.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub components: BTreeMap<Component, f64>,
    pub weights: BTreeMap<Component, f64>,
    pub total: f64,
}

impl LossBreakdown {
    /// Terms are `(name, value, weight)`; the total is accumulated in the given order.
    pub fn from_terms(terms: &[(Component, f64, f64)]) -> Self {
        let mut components = BTreeMap::new();
        let mut weights = BTreeMap::new();
        let mut total = 0.0;
        for &(c, v, w) in terms {
            components.insert(c, v);
            weights.insert(c, w);
            total += w * v;
        }
        LossBreakdown {
            components,
            weights,
            total,
        }
    }

    pub fn component(&self, c: Component) -> Option<f64> {
        self.components.get(&c).copied()
    }

    pub fn weight(&self, c: Component) -> Option<f64> {
        self.weights.get(&c).copied()
    }

    /// Recomputes the weighted sum from the stored terms.
    pub fn recomposed(&self) -> f64 {
        self.components
            .iter()
            .map(|(c, v)| self.weights.get(c).copied().unwrap_or(1.0) * v)
            .sum()
    }

    /// Component-wise mean of several breakdowns sharing the same keys and weights.
    pub fn mean(items: &[LossBreakdown]) -> Option<LossBreakdown> {
        let first = items.first()?;
        let n = items.len() as f64;
        let mut components = BTreeMap::new();
        for c in first.components.keys() {
            let s: f64 = items.iter().map(|b| b.components[c]).sum();
            components.insert(*c, s / n);
        }
        let total = items.iter().map(|b| b.total).sum::<f64>() / n;
        Some(LossBreakdown {
            components,
            weights: first.weights.clone(),
            total,
        })
    }
}

/// One step of the reward / language-bias trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasRecord {
    pub step: u64,
    pub phase: Phase,
    pub reward: f64,
    pub bias: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward_rejected: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias_rejected: Option<f64>,
    pub alpha: f64,
    pub gamma: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<LossBreakdown>,
}

impl BiasRecord {
    pub fn validate(&self) -> Result<()> {
        let has_rejected = self.reward_rejected.is_some() && self.bias_rejected.is_some();
        let has_any = self.reward_rejected.is_some() || self.bias_rejected.is_some();
        match self.phase {
            Phase::Dpo if !has_rejected => Err(Error::invalid(format!(
                "DPO record at step {} lacks rejected-response series",
                self.step
            ))),
            Phase::Vit if has_any => Err(Error::invalid(format!(
                "VIT record at step {} carries rejected-response series",
                self.step
            ))),
            _ => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_seq_rejects_out_of_range() {
        assert!(TokenSeq::new(vec![0, 63], 64).is_ok());
        assert!(TokenSeq::new(vec![64], 64).is_err());
        assert!(TokenSeq::new(vec![], 0).is_err());
    }

    #[test]
    fn log_prob_total_is_checked() {
        let lp =
            SequenceLogProb::new(vec![-1.0, -2.0], Mode::Multimodal, ModelTag::Policy).unwrap();
        assert_eq!(lp.total(), -3.0);
        assert!(
            SequenceLogProb::with_total(vec![-1.0], -1.5, Mode::TextOnly, ModelTag::Policy)
                .is_err()
        );
        assert!(SequenceLogProb::new(vec![0.5], Mode::TextOnly, ModelTag::Policy).is_err());
        assert!(SequenceLogProb::new(vec![f64::NAN], Mode::TextOnly, ModelTag::Policy).is_err());
    }

    #[test]
    fn log_prob_deserialization_enforces_invariant() {
        let bad = r#"{"per_token":[-1.0],"total":-4.0,"mode":"TextOnly","model_tag":"Policy"}"#;
        assert!(serde_json::from_str::<SequenceLogProb>(bad).is_err());
    }

    #[test]
    fn breakdown_total_is_weighted_sum() {
        let b =
            LossBreakdown::from_terms(&[(Component::Vit, 3.0, 1.0), (Component::Lbr, 2.0, 1e-5)]);
        assert!((b.total - 3.00002).abs() < 1e-12);
        assert!((b.recomposed() - b.total).abs() < 1e-12);
    }

    #[test]
    fn bias_record_phase_invariant() {
        let mut r = BiasRecord {
            step: 0,
            phase: Phase::Vit,
            reward: 0.0,
            bias: 0.0,
            reward_rejected: None,
            bias_rejected: None,
            alpha: 0.0,
            gamma: 0.0,
            lr: None,
            loss: None,
        };
        assert!(r.validate().is_ok());
        r.phase = Phase::Dpo;
        assert!(r.validate().is_err());
        r.reward_rejected = Some(0.0);
        r.bias_rejected = Some(0.0);
        assert!(r.validate().is_ok());
    }

    #[test]
    fn taxonomy_parse() {
        assert_eq!(
            TaxonomyCategory::parse("number").unwrap(),
            TaxonomyCategory::Number
        );
        assert!(TaxonomyCategory::parse("Color").is_err());
    }
}
