//! Labelled, seeded random streams.
//!
//! A stream is a ChaCha20 generator whose 256-bit key is the SHA-256 digest of
//! the seed and label, so `(seed, label)` pairs are reproducible on every
//! platform and distinct labels give unrelated streams.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

pub type Stream = ChaCha20Rng;

pub fn rng_stream(seed: u64, label: &str) -> Stream {
    let mut h = Sha256::new();
    h.update(b"biaslab-rng\0");
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    ChaCha20Rng::from_seed(h.finalize().into())
}
