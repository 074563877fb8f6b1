//! Deterministic seed derivation.
//!
//! Every random decision in the crate draws from a ChaCha stream seeded
//! through [`mix`], so a run is a pure function of its configured seeds:
//! per-bag generation streams, per-epoch shuffles, and per-(epoch, bag) mask
//! samples are all derived statelessly. No RNG state ever needs to be
//! checkpointed; resuming at epoch `e` re-derives the exact streams an
//! uninterrupted run would use.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer. Stable across platforms and releases.
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from a parent seed and a stream tag.
pub fn mix(seed: u64, stream: u64) -> u64 {
    splitmix(splitmix(seed) ^ stream)
}

/// Derives a child seed from a parent seed and several stream tags.
pub fn mix_all(seed: u64, streams: &[u64]) -> u64 {
    streams.iter().fold(seed, |s, &t| mix(s, t))
}

/// ChaCha stream for a derived seed.
pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
