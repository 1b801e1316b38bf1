//! Deterministic RNG stream derivation.
//!
//! Every random decision in the pipeline draws from a ChaCha stream keyed by
//! (base seed, purpose tag, indices). Streams keyed by global sample position
//! rather than worker id keep multi-worker runs equal to single-worker runs.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags for derived streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init = 1,
    Augment = 2,
    IbotMask = 3,
    Batch = 4,
    Dropout = 5,
    Teacher = 6,
    Eval = 7,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Mixes a key sequence into a single 64-bit stream seed.
pub fn derive_key(base_seed: u64, stream: Stream, indices: &[u64]) -> u64 {
    let mut h = splitmix64(base_seed ^ (stream as u64).wrapping_mul(0xa076_1d64_78bd_642f));
    for &ix in indices {
        h = splitmix64(h ^ ix.wrapping_mul(0xe703_7ed1_a0b4_28db));
    }
    h
}

/// A seeded ChaCha8 stream for the given purpose and indices.
pub fn stream_rng(base_seed: u64, stream: Stream, indices: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_key(base_seed, stream, indices))
}
