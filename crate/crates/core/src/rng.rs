//! Seed derivation for reproducible, independently seeded streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// RNG for Monte Carlo run `index` under `master`: seeded with `master ^ index`.
pub fn run_rng(master: u64, index: u64) -> SimRng {
    SimRng::seed_from_u64(master ^ index)
}

/// Stream RNG for a named pipeline stage (grid training, transition counting, ...).
///
/// The stage tag and index are mixed through splitmix64 so that distinct
/// stages never share a stream with the per-run seeds of [`run_rng`].
pub fn stream_rng(master: u64, stage: u64, index: u64) -> SimRng {
    SimRng::seed_from_u64(splitmix64(master ^ splitmix64(stage.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index)))
}

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stage tags for [`stream_rng`].
pub mod stage {
    pub const STATE_GRID: u64 = 1;
    pub const STATE_TRANSITIONS: u64 = 2;
    pub const BELIEF_CHAINS: u64 = 3;
    pub const BELIEF_FALLBACK: u64 = 4;
    pub const DISTORTION: u64 = 5;
}
