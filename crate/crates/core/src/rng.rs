//! Deterministic seed derivation and random streams.
//!
//! Every sampling operation takes a seed rather than an ambient RNG so that
//! runs replay bitwise-identically. Sub-streams (per prompt, per dataset
//! side, per stage) are derived from a master seed plus a list of integer
//! labels; derivation uses splitmix64 so it is stable across platforms and
//! library versions.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Labels that keep derived streams for different purposes disjoint.
pub mod stream {
    pub const CHOSEN_DATASET: u64 = 0x01;
    pub const REJECTED_DATASET: u64 = 0x02;
    pub const TAU_SAMPLES: u64 = 0x03;
    pub const PAIRING: u64 = 0x04;
    pub const PARTITION: u64 = 0x05;
    pub const EPOCH_SHUFFLE: u64 = 0x06;
    pub const WORLD: u64 = 0x07;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mix a master seed with a sequence of labels into a sub-stream seed.
pub fn derive_seed(master: u64, labels: &[u64]) -> u64 {
    let mut state = splitmix64(master);
    for &label in labels {
        state = splitmix64(state ^ splitmix64(label));
    }
    state
}

/// A seeded ChaCha stream for the given seed.
pub fn stream_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Convenience: derive a seed and open the stream in one step.
pub fn derived_stream(master: u64, labels: &[u64]) -> ChaCha8Rng {
    stream_from(derive_seed(master, labels))
}
