//! Object-hallucination metrics over greedy generations.
//!
//! A mention is any object-vocabulary token in the output; it is
//! hallucinated iff its object is not in the record's ground truth.
//! Rates with an empty denominator are reported as `None` rather than `0`,
//! so an empty description never scores as hallucination-free.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Vocab, WorldConfig};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::scalar::Scalar;
use crate::types::{Corruption, MultimodalExample, TaxonomyCategory, TaxonomyLabel, TokenId};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub example_id: String,
    pub generated: Vec<TokenId>,
    pub mentions: Vec<String>,
    pub gt_objects: BTreeSet<String>,
    #[serde(default)]
    pub distractor_objects: BTreeSet<String>,
}

impl GenerationRecord {
    fn hallucinated(&self) -> impl Iterator<Item = &String> {
        self.mentions
            .iter()
            .filter(|m| !self.gt_objects.contains(*m))
    }
}

/// Object tokens of `generated`, in order and with multiplicity.
pub fn extract_mentions(generated: &[TokenId], vocab: &Vocab) -> Vec<String> {
    generated
        .iter()
        .filter_map(|&t| vocab.object_of(t))
        .map(|i| vocab.object_name(i).to_string())
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChairScores {
    pub chair_s: f64,
    /// `None` when no record mentions any object.
    pub chair_i: Option<f64>,
}

fn non_empty(records: &[GenerationRecord]) -> Result<()> {
    if records.is_empty() {
        return Err(Error::invalid(
            "metrics need at least one generation record",
        ));
    }
    Ok(())
}

pub fn chair_metrics(records: &[GenerationRecord]) -> Result<ChairScores> {
    non_empty(records)?;
    let mut bad_responses = 0usize;
    let mut bad_mentions = 0usize;
    let mut mentions = 0usize;
    for r in records {
        let h = r.hallucinated().count();
        bad_mentions += h;
        mentions += r.mentions.len();
        bad_responses += usize::from(h > 0);
    }
    Ok(ChairScores {
        chair_s: bad_responses as f64 / records.len() as f64,
        chair_i: (mentions > 0).then(|| bad_mentions as f64 / mentions as f64),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Coverage {
    /// `None` when every record has empty ground truth.
    pub value: Option<f64>,
    /// Records skipped for having no ground-truth objects.
    pub excluded: Vec<String>,
}

/// Mean fraction of ground-truth objects mentioned at least once.
pub fn coverage(records: &[GenerationRecord]) -> Result<Coverage> {
    non_empty(records)?;
    let mut sum = 0.0;
    let mut used = 0usize;
    let mut excluded = Vec::new();
    for r in records {
        if r.gt_objects.is_empty() {
            excluded.push(r.example_id.clone());
            continue;
        }
        let mentioned: BTreeSet<&String> = r.mentions.iter().collect();
        let hit = r
            .gt_objects
            .iter()
            .filter(|o| mentioned.contains(o))
            .count();
        sum += hit as f64 / r.gt_objects.len() as f64;
        used += 1;
    }
    Ok(Coverage {
        value: (used > 0).then(|| sum / used as f64),
        excluded,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HalCog {
    pub hal_rate: f64,
    /// Hallucinated mentions that hit a distractor, over all mentions.
    pub cog_rate: Option<f64>,
}

pub fn hal_and_cog(records: &[GenerationRecord]) -> Result<HalCog> {
    non_empty(records)?;
    let mut bad_responses = 0usize;
    let mut cog = 0usize;
    let mut mentions = 0usize;
    for r in records {
        let mut any = false;
        for m in r.hallucinated() {
            any = true;
            cog += usize::from(r.distractor_objects.contains(m));
        }
        bad_responses += usize::from(any);
        mentions += r.mentions.len();
    }
    Ok(HalCog {
        hal_rate: bad_responses as f64 / records.len() as f64,
        cog_rate: (mentions > 0).then(|| cog as f64 / mentions as f64),
    })
}

/// `score / 3 − (1 − hal_rate)` for a judge score in `[0, 6]`.
pub fn informativeness(score: f64, hal_rate: f64) -> Result<f64> {
    if !(0.0..=6.0).contains(&score) {
        return Err(Error::invalid(format!(
            "judge score {score} outside [0, 6]"
        )));
    }
    if !(0.0..=1.0).contains(&hal_rate) {
        return Err(Error::invalid(format!(
            "hallucination rate {hal_rate} outside [0, 1]"
        )));
    }
    Ok(score / 3.0 - (1.0 - hal_rate))
}

fn zero_counts() -> BTreeMap<TaxonomyCategory, u64> {
    TaxonomyCategory::ALL.into_iter().map(|c| (c, 0)).collect()
}

/// Per-category sums of already-counted labels.
pub fn taxonomy_report<'a>(
    labels: impl IntoIterator<Item = &'a TaxonomyLabel>,
) -> BTreeMap<TaxonomyCategory, u64> {
    let mut counts = zero_counts();
    for l in labels {
        *counts.entry(l.category).or_default() += l.count as u64;
    }
    counts
}

/// Same as [`taxonomy_report`] for `(category, count)` pairs given as text.
pub fn taxonomy_report_named(labels: &[(String, u32)]) -> Result<BTreeMap<TaxonomyCategory, u64>> {
    let mut counts = zero_counts();
    for (name, n) in labels {
        *counts.entry(TaxonomyCategory::parse(name)?).or_default() += *n as u64;
    }
    Ok(counts)
}

/// Counts raw corruptions, dropping errors on an object that does not exist.
///
/// Once an object is counted as an `Existence` error, further attribute,
/// state, number, action or relation errors on it add nothing.
pub fn cascade_counts(corruptions: &[Corruption]) -> BTreeMap<TaxonomyCategory, u32> {
    let mut counts: BTreeMap<TaxonomyCategory, u32> =
        TaxonomyCategory::ALL.into_iter().map(|c| (c, 0)).collect();
    for c in corruptions {
        if c.category != TaxonomyCategory::Existence && c.phantom {
            continue;
        }
        *counts.get_mut(&c.category).expect("all categories present") += 1;
    }
    counts
}

/// Summary of one evaluation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub chair_s: f64,
    pub chair_i: Option<f64>,
    pub coverage: Option<f64>,
    pub hal_rate: f64,
    pub cog_rate: Option<f64>,
    /// Only present when a judge score was supplied.
    pub informativeness: Option<f64>,
    pub taxonomy_counts: BTreeMap<TaxonomyCategory, u64>,
    pub n_records: usize,
    pub mentions_per_response: f64,
    pub coverage_excluded: Vec<String>,
}

impl EvalReport {
    pub fn compute(
        records: &[GenerationRecord],
        labels: &[TaxonomyLabel],
        judge_score: Option<f64>,
    ) -> Result<Self> {
        let chair = chair_metrics(records)?;
        let cov = coverage(records)?;
        let hc = hal_and_cog(records)?;
        let informativeness = judge_score
            .map(|s| informativeness(s, hc.hal_rate))
            .transpose()?;
        let mentions: usize = records.iter().map(|r| r.mentions.len()).sum();
        Ok(EvalReport {
            chair_s: chair.chair_s,
            chair_i: chair.chair_i,
            coverage: cov.value,
            hal_rate: hc.hal_rate,
            cog_rate: hc.cog_rate,
            informativeness,
            taxonomy_counts: taxonomy_report(labels),
            n_records: records.len(),
            mentions_per_response: mentions as f64 / records.len() as f64,
            coverage_excluded: cov.excluded,
        })
    }

    /// Aligned two-column table for terminals.
    pub fn to_table(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("undefined".to_string(), |x| format!("{x:.4}"));
        let mut out = String::new();
        let mut row = |k: &str, v: String| {
            let _ = writeln!(out, "{k:<24}{v:>12}");
        };
        row("CHAIR_s", format!("{:.4}", self.chair_s));
        row("CHAIR_i", opt(self.chair_i));
        row("coverage", opt(self.coverage));
        row("hal_rate", format!("{:.4}", self.hal_rate));
        row("cog_rate", opt(self.cog_rate));
        row("informativeness", opt(self.informativeness));
        row(
            "mentions/response",
            format!("{:.3}", self.mentions_per_response),
        );
        row("records", self.n_records.to_string());
        for (c, n) in &self.taxonomy_counts {
            row(&format!("taxonomy.{c}"), n.to_string());
        }
        out
    }
}

/// Greedy next token with the lowest index winning ties.
pub fn argmax<T: Scalar>(logp: &[T]) -> TokenId {
    let mut best = 0;
    for (i, &v) in logp.iter().enumerate() {
        if v > logp[best] {
            best = i;
        }
    }
    best as TokenId
}

/// Objects that co-occur with the ground truth but are absent from it.
pub fn distractors(world: &WorldConfig, gt: &BTreeSet<String>) -> BTreeSet<String> {
    let vocab = world.vocab();
    gt.iter()
        .filter_map(|o| vocab.object_index(o))
        .flat_map(|i| world.partners(i).map(|(p, _)| p))
        .map(|p| vocab.object_name(p).to_string())
        .filter(|p| !gt.contains(p))
        .collect()
}

/// Greedy decoding from `(v, x)` until the end token or `max_len` tokens.
pub fn generate_descriptions<T: Scalar>(
    model: &Model<T>,
    examples: &[MultimodalExample],
    world: &WorldConfig,
    end_token: TokenId,
    max_len: usize,
) -> Result<Vec<GenerationRecord>> {
    let vocab = world.vocab();
    examples
        .par_iter()
        .map(|ex| {
            let room = model
                .config()
                .max_seq_len
                .saturating_sub(ex.visual.n_tokens() + ex.instruction.len());
            let limit = max_len.min(room);
            let mut generated = Vec::new();
            while generated.len() < limit {
                let logp =
                    model.next_token_logprobs(Some(&ex.visual), &ex.instruction, &generated)?;
                let next = argmax(&logp);
                if next == end_token {
                    break;
                }
                generated.push(next);
            }
            Ok(GenerationRecord {
                example_id: ex.example_id.clone(),
                mentions: extract_mentions(&generated, &vocab),
                generated,
                gt_objects: ex.gt_objects.clone(),
                distractor_objects: distractors(world, &ex.gt_objects),
            })
        })
        .collect()
}
