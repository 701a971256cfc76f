//! Scene sampling and corpus generation.
//!
//! A scene is an ordered list of object slots. Objects are drawn as anchors
//! and each anchor pulls in its co-occurrence partners with the table's
//! probability, so the description order carries a strong but fallible
//! textual prior: after `fork` comes `knife` most of the time.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::vocab::*;
use super::world::WorldConfig;
use crate::error::Result;
use crate::eval::cascade_counts;
use crate::rng::{rng_stream, Stream};
use crate::types::{
    Corruption, MultimodalExample, PreferencePair, TaxonomyCategory, TaxonomyLabel, TokenId,
    TokenSeq, VisualContext,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ObjectSlot {
    pub object: usize,
    pub count: u8,
    pub attr: u8,
    pub state: u8,
    pub action: u8,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub slots: Vec<ObjectSlot>,
    pub relation: u8,
    /// Whether the first anchor's first partner was withheld although it would have fit.
    pub first_partner_trap: Option<bool>,
}

impl Scene {
    pub fn objects(&self) -> BTreeSet<usize> {
        self.slots.iter().map(|s| s.object).collect()
    }
}

fn random_slot(world: &WorldConfig, object: usize, rng: &mut Stream) -> ObjectSlot {
    let u: f64 = rng.gen();
    let count = if u < 0.6 {
        0
    } else if u < 0.9 {
        1
    } else {
        2
    };
    let attr = if rng.gen::<f64>() < world.typical_attribute_rate {
        (object % ATTRS.len()) as u8
    } else {
        rng.gen_range(0..ATTRS.len()) as u8
    };
    ObjectSlot {
        object,
        count,
        attr,
        state: rng.gen_range(0..STATES.len()) as u8,
        action: rng.gen_range(0..ACTIONS.len()) as u8,
    }
}

pub fn sample_scene(world: &WorldConfig, rng: &mut Stream) -> Scene {
    let (lo, hi) = world.scene_size_range;
    let k = rng.gen_range(lo..=hi);
    let mut present = BTreeSet::new();
    // Partners withheld by a trap may not re-enter as later anchors.
    let mut withheld = BTreeSet::new();
    let mut slots = Vec::with_capacity(k);
    let mut first_partner_trap = None;
    while slots.len() < k {
        let candidates: Vec<usize> = (0..world.n_objects)
            .filter(|o| !present.contains(o) && !withheld.contains(o))
            .collect();
        let Some(&anchor) = candidates.choose(rng) else {
            break;
        };
        let is_first = slots.is_empty();
        present.insert(anchor);
        slots.push(random_slot(world, anchor, rng));
        let partners: Vec<(usize, f64)> = world.partners(anchor).collect();
        for (j, (partner, p)) in partners.into_iter().enumerate() {
            if slots.len() >= k || present.contains(&partner) || withheld.contains(&partner) {
                continue;
            }
            let keep = rng.gen::<f64>() < p;
            if is_first && j == 0 {
                first_partner_trap = Some(!keep);
            }
            if keep {
                present.insert(partner);
                slots.push(random_slot(world, partner, rng));
            } else {
                withheld.insert(partner);
            }
        }
    }
    Scene {
        slots,
        relation: rng.gen_range(0..RELATIONS.len()) as u8,
        first_partner_trap,
    }
}

/// Fixed feature vectors for every visual concept of a world.
#[derive(Clone, Debug)]
pub struct ConceptFeatures {
    objects: Vec<Vec<f64>>,
    counts: Vec<Vec<f64>>,
    attrs: Vec<Vec<f64>>,
    states: Vec<Vec<f64>>,
    actions: Vec<Vec<f64>>,
    relations: Vec<Vec<f64>>,
}

impl ConceptFeatures {
    pub fn new(world: &WorldConfig) -> Self {
        let mut rng = rng_stream(world.embedding_seed, "world-features");
        let d = world.feature_dim;
        let mut table = |n: usize, scale: f64| -> Vec<Vec<f64>> {
            let normal = Normal::new(0.0, scale).expect("positive scale");
            (0..n)
                .map(|_| (0..d).map(|_| normal.sample(&mut rng)).collect())
                .collect()
        };
        ConceptFeatures {
            objects: table(world.n_objects, 1.0),
            counts: table(COUNTS.len(), 0.5),
            attrs: table(ATTRS.len(), 0.5),
            states: table(STATES.len(), 0.5),
            actions: table(ACTIONS.len(), 0.5),
            relations: table(RELATIONS.len(), 0.5),
        }
    }

    /// One visual token per slot; the relation is folded into the first token.
    pub fn render(&self, scene: &Scene, sigma: f64, rng: &mut Stream) -> Vec<Vec<f64>> {
        let noise = Normal::new(0.0, sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
        scene
            .slots
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let parts = [
                    &self.objects[s.object],
                    &self.counts[s.count as usize],
                    &self.attrs[s.attr as usize],
                    &self.states[s.state as usize],
                    &self.actions[s.action as usize],
                ];
                let mut row: Vec<f64> = (0..self.objects[0].len())
                    .map(|j| parts.iter().map(|p| p[j]).sum())
                    .collect();
                if i == 0 {
                    for (r, v) in row.iter_mut().zip(&self.relations[scene.relation as usize]) {
                        *r += v;
                    }
                }
                if sigma > 0.0 {
                    for r in row.iter_mut() {
                        *r += noise.sample(rng);
                    }
                }
                row
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug)]
struct Phrase {
    slot: ObjectSlot,
    phantom: bool,
}

fn render_description(
    vocab: &Vocab,
    phrases: &[Phrase],
    relation: Option<(usize, u8, usize)>,
) -> Vec<TokenId> {
    let mut out = Vec::with_capacity(phrases.len() * 6 + 4);
    for (i, p) in phrases.iter().enumerate() {
        if i > 0 {
            out.push(AND);
        }
        let s = p.slot;
        out.extend([
            COUNT_BASE + s.count as TokenId,
            ATTR_BASE + s.attr as TokenId,
            STATE_BASE + s.state as TokenId,
            vocab.object_token(s.object),
            ACTION_BASE + s.action as TokenId,
        ]);
    }
    if let Some((a, rel, b)) = relation {
        out.extend([
            vocab.object_token(a),
            RELATION_BASE + rel as TokenId,
            vocab.object_token(b),
        ]);
    }
    out.push(EOS);
    out
}

fn scene_relation(scene: &Scene) -> Option<(usize, u8, usize)> {
    (scene.slots.len() >= 2).then(|| (scene.slots[0].object, scene.relation, scene.slots[1].object))
}

/// Faithful description of a scene.
pub fn describe(vocab: &Vocab, scene: &Scene) -> Vec<TokenId> {
    let phrases: Vec<Phrase> = scene
        .slots
        .iter()
        .map(|&slot| Phrase {
            slot,
            phantom: false,
        })
        .collect();
    render_description(vocab, &phrases, scene_relation(scene))
}

struct Sampled {
    scene: Scene,
    visual: VisualContext,
    instruction: TokenSeq,
    gt_objects: BTreeSet<String>,
}

fn sample_example(
    world: &WorldConfig,
    features: &ConceptFeatures,
    image_id: String,
    rng: &mut Stream,
) -> Result<Sampled> {
    let vocab = world.vocab();
    let scene = sample_scene(world, rng);
    let rows = features.render(&scene, world.feature_noise_sigma, rng);
    let visual = VisualContext::new(image_id, rows)?;
    let template = TEMPLATES[rng.gen_range(0..TEMPLATES.len())];
    let instruction = TokenSeq::new(template.to_vec(), world.vocab_size())?;
    let gt_objects = scene
        .objects()
        .into_iter()
        .filter(|_| rng.gen::<f64>() >= world.gt_dropout_rate)
        .map(|o| vocab.object_name(o).to_string())
        .collect();
    Ok(Sampled {
        scene,
        visual,
        instruction,
        gt_objects,
    })
}

pub fn generate_vit_corpus(
    world: &WorldConfig,
    n: usize,
    seed: u64,
) -> Result<Vec<MultimodalExample>> {
    world.validate()?;
    let vocab = world.vocab();
    let features = ConceptFeatures::new(world);
    (0..n)
        .map(|i| {
            let mut rng = rng_stream(seed, &format!("vit-example/{i}"));
            let s = sample_example(world, &features, format!("img-{i:06}"), &mut rng)?;
            let response = TokenSeq::new(describe(&vocab, &s.scene), world.vocab_size())?;
            Ok(MultimodalExample {
                example_id: format!("vit-{i:06}"),
                visual: s.visual,
                instruction: s.instruction,
                response,
                gt_objects: s.gt_objects,
                annotations: None,
            })
        })
        .collect()
}

fn pick_category(world: &WorldConfig, rng: &mut Stream, allow_relation: bool) -> TaxonomyCategory {
    let mix = world.mixture();
    let total: f64 = mix
        .iter()
        .filter(|(c, _)| allow_relation || *c != TaxonomyCategory::Relation)
        .map(|(_, w)| w)
        .sum();
    let mut u = rng.gen::<f64>() * total;
    let mut last = TaxonomyCategory::Existence;
    for (c, w) in mix {
        if !allow_relation && c == TaxonomyCategory::Relation {
            continue;
        }
        if w > 0.0 {
            last = c;
        }
        if u < w {
            return c;
        }
        u -= w;
    }
    last
}

fn different(rng: &mut Stream, current: u8, n: usize) -> u8 {
    let v = rng.gen_range(0..n - 1) as u8;
    if v >= current {
        v + 1
    } else {
        v
    }
}

fn corrupt(
    world: &WorldConfig,
    scene: &Scene,
    phrases: &mut Vec<Phrase>,
    relation: &mut Option<(usize, u8, usize)>,
    category: TaxonomyCategory,
    rng: &mut Stream,
) -> Corruption {
    let vocab = world.vocab();
    let name = |o: usize| vocab.object_name(o).to_string();
    match category {
        TaxonomyCategory::Existence => {
            let mentioned: BTreeSet<usize> = phrases.iter().map(|p| p.slot.object).collect();
            let likely: Vec<usize> = scene
                .slots
                .iter()
                .flat_map(|s| world.partners(s.object).map(|(o, _)| o))
                .filter(|o| !mentioned.contains(o))
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect();
            let pool: Vec<usize> = if likely.is_empty() {
                (0..world.n_objects)
                    .filter(|o| !mentioned.contains(o))
                    .collect()
            } else {
                likely
            };
            let object = *pool
                .choose(rng)
                .expect("world has more objects than any scene");
            let at = rng.gen_range(0..=phrases.len());
            phrases.insert(
                at,
                Phrase {
                    slot: random_slot(world, object, rng),
                    phantom: true,
                },
            );
            Corruption {
                category,
                object: name(object),
                phantom: false,
            }
        }
        TaxonomyCategory::Relation => {
            let (a, rel, b) = relation.expect("relation corruptions need a relation clause");
            *relation = Some((a, different(rng, rel, RELATIONS.len()), b));
            Corruption {
                category,
                object: name(a),
                phantom: false,
            }
        }
        _ => {
            let i = rng.gen_range(0..phrases.len());
            let p = &mut phrases[i];
            match category {
                TaxonomyCategory::Attribute => {
                    p.slot.attr = different(rng, p.slot.attr, ATTRS.len())
                }
                TaxonomyCategory::State => {
                    p.slot.state = different(rng, p.slot.state, STATES.len())
                }
                TaxonomyCategory::Number => {
                    p.slot.count = different(rng, p.slot.count, COUNTS.len())
                }
                TaxonomyCategory::Action => {
                    p.slot.action = different(rng, p.slot.action, ACTIONS.len())
                }
                _ => unreachable!(),
            }
            Corruption {
                category,
                object: name(p.slot.object),
                phantom: p.phantom,
            }
        }
    }
}

/// Upper bound on corruptions per rejected response; keeps sequences within the default context.
pub const MAX_CORRUPTIONS: usize = 3;

/// Faithful `chosen` responses paired with taxonomy-corrupted `rejected` ones.
///
/// Each pair carries at least one corruption; further ones are added while a
/// uniform draw stays below `hallucination_rate`.
pub fn generate_preference_corpus(
    world: &WorldConfig,
    n: usize,
    seed: u64,
) -> Result<Vec<PreferencePair>> {
    world.validate()?;
    let vocab = world.vocab();
    let features = ConceptFeatures::new(world);
    (0..n)
        .map(|i| {
            let mut rng = rng_stream(seed, &format!("preference-pair/{i}"));
            let s = sample_example(world, &features, format!("img-{i:06}"), &mut rng)?;
            let chosen = describe(&vocab, &s.scene);
            let mut phrases: Vec<Phrase> = s
                .scene
                .slots
                .iter()
                .map(|&slot| Phrase {
                    slot,
                    phantom: false,
                })
                .collect();
            let mut relation = scene_relation(&s.scene);
            let mut corruptions = Vec::new();
            loop {
                let category = pick_category(world, &mut rng, relation.is_some());
                corruptions.push(corrupt(
                    world,
                    &s.scene,
                    &mut phrases,
                    &mut relation,
                    category,
                    &mut rng,
                ));
                let rejected = render_description(&vocab, &phrases, relation);
                let stop = corruptions.len() >= MAX_CORRUPTIONS
                    || rng.gen::<f64>() >= world.hallucination_rate;
                if rejected != chosen && stop {
                    break;
                }
            }
            let rejected = render_description(&vocab, &phrases, relation);
            let annotations = cascade_counts(&corruptions)
                .into_iter()
                .filter(|&(_, n)| n > 0)
                .map(|(category, count)| TaxonomyLabel { category, count })
                .collect();
            Ok(PreferencePair {
                pair_id: format!("pair-{i:06}"),
                visual: s.visual,
                instruction: s.instruction,
                chosen: TokenSeq::new(chosen, world.vocab_size())?,
                rejected: TokenSeq::new(rejected, world.vocab_size())?,
                gt_objects: s.gt_objects,
                annotations,
                corruptions,
            })
        })
        .collect()
}
