//! Named, independently seeded random streams.
//!
//! Every stochastic stage draws from its own ChaCha8 stream whose 256-bit seed
//! is `SHA-256(le_bytes(seed) || name || le_bytes(index))`. Stages can run in
//! any order, or be skipped, without shifting each other's draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

/// Stream names used across the crate.
pub mod streams {
    pub const COHORT: &str = "cohort";
    pub const MAPPING: &str = "mapping";
    pub const MASKING: &str = "masking";
    pub const INIT: &str = "init";
    pub const SAMPLING: &str = "sampling";
    pub const VARIANTS: &str = "variants";
    pub const DROPOUT: &str = "dropout";
    pub const SPLIT: &str = "split";
}

pub fn stream(seed: u64, name: &str) -> StreamRng {
    indexed_stream(seed, name, 0)
}

/// Sub-stream `index` of `name`, e.g. one per patient.
pub fn indexed_stream(seed: u64, name: &str, index: u64) -> StreamRng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}
