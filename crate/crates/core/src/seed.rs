//! Seed streams. Every random consumer derives its own stream from a base
//! seed and a stream label, so serial and parallel schedules draw identical
//! numbers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Child seed for `stream` under `base`.
pub fn derive(base: u64, stream: u64) -> u64 {
    splitmix64(base ^ splitmix64(stream))
}

pub fn rng(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Named stream labels, so datagen/site/bench never collide.
pub mod stream {
    pub const GRAPH_STRUCTURE: u64 = 0x01;
    pub const GRAPH_PARTITION: u64 = 0x02;
    pub const GRAPH_VALUES: u64 = 0x03;
    pub const SAMPLE_SIZES: u64 = 0x10;
    pub const SITE_DATA: u64 = 0x20;
    pub const SITE_SPLIT: u64 = 0x30;
    pub const HOLDOUT: u64 = 0x40;
    pub const CROSS_VALIDATION: u64 = 0x50;
    pub const REPLICATION: u64 = 0x60;
}
