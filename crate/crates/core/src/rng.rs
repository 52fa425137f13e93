//! Counter-keyed random streams.
//!
//! Every random decision in a run draws from a stream keyed by the run seed
//! and a tuple of counters (purpose tag, epoch, step, sample, view, ...).
//! Results therefore do not depend on execution order or on where a run was
//! resumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

/// Purpose tags that separate the streams of one run.
pub mod tag {
    pub const PERMUTATION: u64 = 0x5045_524d;
    pub const VIEW: u64 = 0x5649_4557;
    pub const APPEARANCE: u64 = 0x4150_5052;
    pub const RANDOM_SELECT: u64 = 0x5253_454c;
    pub const PAIR_CAP: u64 = 0x5041_4952;
    pub const IOU_POLICY: u64 = 0x494f_5550;
    pub const INIT: u64 = 0x494e_4954;
    pub const SYNTH: u64 = 0x5359_4e54;
    pub const PROBE: u64 = 0x5052_4f42;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Fold a seed and a counter tuple into a single 64-bit key.
pub fn key(seed: u64, counters: &[u64]) -> u64 {
    counters
        .iter()
        .fold(splitmix64(seed), |acc, &c| splitmix64(acc ^ splitmix64(c)))
}

pub fn stream(seed: u64, counters: &[u64]) -> Stream {
    ChaCha8Rng::seed_from_u64(key(seed, counters))
}
