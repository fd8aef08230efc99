//! Seed derivation. Every random stream in a run is a pure function of the
//! run seed and a short tag path, so results do not depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type LabRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a seed with a tag path into a single 64-bit stream key.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(seed), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

/// Independent RNG stream for `(seed, tags...)`.
pub fn stream(seed: u64, tags: &[u64]) -> LabRng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tags))
}

/// Stream tags shared by curation and the harness.
pub mod tag {
    pub const WORLD: u64 = 1;
    pub const POLICY_INIT: u64 = 2;
    pub const TEACHER: u64 = 3;
    pub const SFT_SHUFFLE: u64 = 4;
    pub const SAMPLE_CURRENT: u64 = 10;
    pub const SAMPLE_ANCHOR: u64 = 11;
    pub const SAMPLE_FUTURE: u64 = 12;
    pub const JUDGE_CURRENT: u64 = 20;
    pub const JUDGE_ANCHOR: u64 = 21;
    pub const JUDGE_FUTURE: u64 = 22;
    pub const JUDGE_LABEL: u64 = 23;
    pub const TRAIN_SHUFFLE: u64 = 30;
    pub const EVAL: u64 = 40;
}
