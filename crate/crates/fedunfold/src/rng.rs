//! Deterministic stream derivation.
//!
//! Every random decision in the simulator draws from a ChaCha stream keyed
//! by the master seed plus a purpose tag and indices (client, round, ...).
//! Distinct keys give independent streams, so evaluation order, parallelism,
//! and strategy choice never change what data anyone samples.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub mod purpose {
    pub const MODEL_INIT: u64 = 1;
    pub const MINIBATCH: u64 = 2;
    pub const AVAILABILITY: u64 = 3;
    pub const PARTITION: u64 = 4;
    pub const SYNTH_TRAIN: u64 = 5;
    pub const SYNTH_TEST: u64 = 6;
    pub const META_INIT: u64 = 7;
    pub const RUN_REPEAT: u64 = 8;
    pub const SYNTH_CENTERS: u64 = 9;
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Mix a master seed with tags into a single derived seed.
pub fn mix(master: u64, tags: &[u64]) -> u64 {
    let mut state = master;
    let mut acc = splitmix64(&mut state);
    for &t in tags {
        state ^= t.wrapping_mul(0xff51afd7ed558ccd);
        acc ^= splitmix64(&mut state);
    }
    acc
}

/// ChaCha stream keyed by (master, tags).
pub fn stream(master: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut state = master;
    let _ = splitmix64(&mut state);
    for &t in tags {
        state ^= t.wrapping_mul(0xff51afd7ed558ccd);
        let _ = splitmix64(&mut state);
    }
    let mut seed = [0u8; 32];
    for chunk in seed.chunks_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(seed)
}
