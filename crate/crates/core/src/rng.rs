//! Deterministic per-purpose random streams.
//!
//! Every random decision in a run draws from a stream keyed by
//! `(seed, purpose, index)`, so the outcome for one question never depends on
//! how many draws other questions consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Stream purposes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Propose = 1,
    Validate = 2,
    InitRollout = 3,
    ReplaySample = 4,
    Solve = 5,
    Judge = 6,
    Probe = 7,
}

pub fn stream(seed: u64, purpose: Purpose, index: u64) -> StreamRng {
    let key = splitmix64(splitmix64(seed ^ splitmix64(purpose as u64)) ^ index);
    ChaCha8Rng::seed_from_u64(key)
}
