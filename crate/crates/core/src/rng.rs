//! Seed derivation and deterministic random streams.
//!
//! Every random decision in the workbench draws from a ChaCha8 stream whose
//! seed is derived from one master seed and a purpose tag, so independent
//! consumers (heap slots, episodes, evaluation rollouts) can be reordered or
//! parallelized without changing results.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags for seed derivation. Values are arbitrary but fixed.
pub mod stream {
    pub const HEAPGEN: u64 = 0x01;
    pub const RESET: u64 = 0x02;
    pub const BEHAVIOR: u64 = 0x03;
    pub const ACTOR_INIT: u64 = 0x04;
    pub const CRITIC_INIT: u64 = 0x05;
    pub const REPLAY: u64 = 0x06;
    pub const EVAL: u64 = 0x07;
    pub const EPISODE: u64 = 0x08;
    pub const ROLLOUT: u64 = 0x09;
}

/// SplitMix64 finalizer; good avalanche for seed mixing.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from a master seed and up to three indices.
pub fn derive(master: u64, tag: u64, a: u64, b: u64) -> u64 {
    let mut z = splitmix64(master ^ tag.wrapping_mul(0xa076_1d64_78bd_642f));
    z = splitmix64(z ^ a.wrapping_mul(0xe703_7ed1_a0b4_28db));
    splitmix64(z ^ b.wrapping_mul(0x8ebc_6af0_9c88_c6e3))
}

/// Deterministic stream for the given derived seed.
pub fn stream_rng(master: u64, tag: u64, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(master, tag, a, b))
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// One standard normal sample pair via Box-Muller.
pub fn gauss2(rng: &mut impl Rng) -> (f64, f64) {
    // Left-open uniform keeps ln() finite.
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen::<f64>();
    let r = (-2.0 * u1.ln()).sqrt();
    let t = std::f64::consts::TAU * u2;
    (r * t.cos(), r * t.sin())
}
