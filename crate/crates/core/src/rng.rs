//! Seed derivation for independent, reproducible random substreams.
//!
//! Every random decision in the pipeline draws from a `ChaCha8Rng` whose seed
//! is a pure function of the root seed and a small tuple of stream tags, so
//! results never depend on consumption order across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Stream domains; keeps e.g. corruption and dropout streams of the same
/// step from ever colliding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    Epoch = 1,
    Corruption = 2,
    Dropout = 3,
    Init = 4,
    Finetune = 5,
    Split = 6,
    Synthetic = 7,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `root` with `domain` and `tags` into a 64-bit seed.
pub fn derive_seed(root: u64, domain: Domain, tags: &[u64]) -> u64 {
    let mut h = splitmix64(root ^ splitmix64(domain as u64));
    for &t in tags {
        h = splitmix64(h ^ splitmix64(t.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    h
}

pub fn stream(root: u64, domain: Domain, tags: &[u64]) -> StreamRng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, domain, tags))
}
