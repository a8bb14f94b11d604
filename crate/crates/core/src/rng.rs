//! Named, keyed random streams derived from a single run seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Stream used for dataset synthesis and online anomaly generation.
pub const DATA: &str = "data";
/// Stream used for weight and architecture initialization.
pub const INIT: &str = "init";
/// Stream used for batching and splits during search and training.
pub const SEARCH: &str = "search";

/// Independent generator for `(seed, name, keys)`.
pub fn keyed(seed: u64, name: &str, keys: &[u64]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((name.len() as u64).to_le_bytes());
    h.update(name.as_bytes());
    for k in keys {
        h.update(k.to_le_bytes());
    }
    ChaCha8Rng::from_seed(h.finalize().into())
}

pub fn stream(seed: u64, name: &str) -> ChaCha8Rng {
    keyed(seed, name, &[])
}
