//! Named deterministic RNG substreams.
//!
//! Every random decision in the crate draws from a ChaCha8 stream derived
//! from `(master seed, stream name)`. Distinct names give statistically
//! independent streams, and adding a new consumer never perturbs existing
//! ones — which is what keeps end-to-end runs reproducible when code grows.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derive a ChaCha8 RNG for `name` from the master `seed`.
pub fn substream(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(substream_key(seed, name))
}

/// The raw 32-byte key behind [`substream`], useful when a consumer wants to
/// fold in further context before seeding.
pub fn substream_key(seed: u64, name: &str) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update([0x1f]); // separator so ("1", "x") != (1, "x") style collisions can't occur
    hasher.update(name.as_bytes());
    hasher.finalize().into()
}

/// Collapse a substream to a single `u64`, for APIs that take a plain seed
/// (e.g. re-seeding the batch shuffler once per epoch).
pub fn substream_u64(seed: u64, name: &str) -> u64 {
    let key = substream_key(seed, name);
    u64::from_le_bytes(key[..8].try_into().expect("slice is eight bytes"))
}
