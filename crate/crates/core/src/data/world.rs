use serde::{Deserialize, Serialize};

use super::vocab::{Vocab, OBJECT_BASE};
use crate::error::{Error, Result};
use crate::record::sha256_hex;
use crate::types::TaxonomyCategory;

/// Default object names, listed as co-occurring partner pairs.
pub const DEFAULT_OBJECTS: [&str; 32] = [
    "table",
    "chair",
    "cup",
    "saucer",
    "fork",
    "knife",
    "dog",
    "leash",
    "car",
    "road",
    "boat",
    "water",
    "bed",
    "pillow",
    "laptop",
    "mouse",
    "toothbrush",
    "sink",
    "horse",
    "saddle",
    "kite",
    "sky",
    "surfboard",
    "wave",
    "bottle",
    "glass",
    "stove",
    "pan",
    "orange",
    "banana",
    "person",
    "umbrella",
];

/// One row entry of the conditional co-occurrence table: `P(to present | from anchored)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoEdge {
    pub from: usize,
    pub to: usize,
    pub p: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub n_objects: usize,
    pub object_names: Vec<String>,
    pub cooccurrence: Vec<CoEdge>,
    pub scene_size_range: (usize, usize),
    pub feature_noise_sigma: f64,
    pub hallucination_rate: f64,
    pub gt_dropout_rate: f64,
    /// Relative weights of corruption categories, in `TaxonomyCategory::ALL` order.
    pub taxonomy_mixture: [f64; 6],
    /// Probability an object shows its characteristic attribute.
    pub typical_attribute_rate: f64,
    pub feature_dim: usize,
    /// Seed of the fixed per-concept feature vectors.
    pub embedding_seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self::paired(DEFAULT_OBJECTS.iter().map(|s| s.to_string()).collect(), 0.9)
    }
}

impl WorldConfig {
    /// Objects `2k` and `2k+1` are mutual partners with co-occurrence `p`.
    pub fn paired(object_names: Vec<String>, p: f64) -> Self {
        let n = object_names.len();
        let cooccurrence = (0..n)
            .filter(|i| (i ^ 1) < n)
            .map(|i| CoEdge {
                from: i,
                to: i ^ 1,
                p,
            })
            .collect();
        WorldConfig {
            n_objects: n,
            object_names,
            cooccurrence,
            scene_size_range: (2, 5),
            feature_noise_sigma: 0.1,
            hallucination_rate: 0.5,
            gt_dropout_rate: 0.0,
            taxonomy_mixture: [1.0; 6],
            typical_attribute_rate: 0.6,
            feature_dim: 16,
            embedding_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_objects < 4 {
            return Err(Error::invalid("world: n_objects must be at least 4"));
        }
        if self.object_names.len() != self.n_objects {
            return Err(Error::invalid(
                "world: object_names length differs from n_objects",
            ));
        }
        let mut names = self.object_names.clone();
        names.sort();
        names.dedup();
        if names.len() != self.n_objects {
            return Err(Error::invalid("world: duplicate object names"));
        }
        let probs = [
            (
                "feature_noise_sigma",
                self.feature_noise_sigma,
                f64::INFINITY,
            ),
            ("hallucination_rate", self.hallucination_rate, 1.0),
            ("gt_dropout_rate", self.gt_dropout_rate, 1.0),
            ("typical_attribute_rate", self.typical_attribute_rate, 1.0),
        ];
        for (name, v, hi) in probs {
            if !(0.0..=hi).contains(&v) {
                return Err(Error::invalid(format!("world: {name} = {v} out of range")));
            }
        }
        // Strictly below one so the number of corruptions per pair stays finite in expectation.
        if self.hallucination_rate >= 1.0 {
            return Err(Error::invalid("world: hallucination_rate must be < 1"));
        }
        for e in &self.cooccurrence {
            if e.from >= self.n_objects || e.to >= self.n_objects || e.from == e.to {
                return Err(Error::invalid("world: co-occurrence edge out of range"));
            }
            if !(0.0..=1.0).contains(&e.p) {
                return Err(Error::invalid(
                    "world: co-occurrence probability out of [0,1]",
                ));
            }
        }
        let (lo, hi) = self.scene_size_range;
        if lo < 1 || lo > hi || hi > self.n_objects {
            return Err(Error::invalid("world: bad scene_size_range"));
        }
        let w = self.taxonomy_mixture;
        if w.iter().any(|x| !(*x >= 0.0 && x.is_finite())) || w.iter().sum::<f64>() <= 0.0 {
            return Err(Error::invalid(
                "world: taxonomy_mixture must be non-negative and non-zero",
            ));
        }
        if self.feature_dim == 0 {
            return Err(Error::invalid("world: feature_dim must be positive"));
        }
        Ok(())
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.object_names.clone())
    }

    pub fn vocab_size(&self) -> u32 {
        OBJECT_BASE + self.n_objects as u32
    }

    /// Co-occurrence partners of `object` with positive probability, in table order.
    pub fn partners(&self, object: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.cooccurrence
            .iter()
            .filter(move |e| e.from == object && e.p > 0.0)
            .map(|e| (e.to, e.p))
    }

    /// Normalised taxonomy mixture, in `TaxonomyCategory::ALL` order.
    pub fn mixture(&self) -> [(TaxonomyCategory, f64); 6] {
        let s: f64 = self.taxonomy_mixture.iter().sum();
        let mut out = [(TaxonomyCategory::Existence, 0.0); 6];
        for (i, c) in TaxonomyCategory::ALL.into_iter().enumerate() {
            out[i] = (c, self.taxonomy_mixture[i] / s);
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("world serializes")
    }

    pub fn hash(&self) -> String {
        sha256_hex(
            serde_json::to_string(self)
                .expect("world serializes")
                .as_bytes(),
        )
    }
}
