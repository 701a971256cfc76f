//! Synthetic multimodal corpora whose text statistics conflict with the visual ground truth.

pub mod corpus;
pub mod generate;
pub mod vocab;
pub mod world;

pub use corpus::{
    load_corpus, validate_corpus, Corpus, CorpusHeader, CorpusKind, Records, ValidationReport,
};
pub use generate::{generate_preference_corpus, generate_vit_corpus, sample_scene, Scene};
pub use vocab::Vocab;
pub use world::WorldConfig;
