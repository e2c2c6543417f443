//! Seed-derived random streams.
//!
//! Every consumer of randomness owns a stream derived from the run seed plus
//! a fixed label and the indices that identify the draw site (iteration,
//! frame, pixel). Streams are independent of thread count and of each other,
//! which is what makes training resumable and bit-reproducible.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; good avalanche for combining words into a seed.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a reproducible generator from the run seed, a site label, and the
/// words identifying the draw site.
pub fn stream(seed: u64, label: &str, words: &[u64]) -> ChaCha8Rng {
    let mut state = mix(seed);
    for byte in label.as_bytes() {
        state = mix(state ^ u64::from(*byte));
    }
    for w in words {
        state = mix(state ^ *w);
    }
    ChaCha8Rng::seed_from_u64(state)
}
