//! Seed-lane derivation.
//!
//! Every source of randomness in an experiment (data generation, each
//! noise stream, each trial) draws from its own lane so that trials can
//! run in parallel and reproduce bit-identically.

/// SplitMix64 finalizer; good avalanche, stable across platforms.
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derives an independent lane from a base seed and a list of indices.
pub fn lane(base: u64, path: &[u64]) -> u64 {
    let mut state = splitmix64(base);
    for &p in path {
        state = splitmix64(state ^ p.wrapping_mul(0xd1342543de82ef95));
    }
    state
}

/// Well-known lane tags.
pub mod tag {
    pub const DATA_TRAIN: u64 = 1;
    pub const DATA_TEST: u64 = 2;
    pub const NOISE_PRIMARY: u64 = 3;
    pub const NOISE_SECOND: u64 = 4;
    pub const TUNING_BLOCK: u64 = 5;
}
