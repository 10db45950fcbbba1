//! Deterministic seed derivation.
//!
//! A single root seed is split into independent streams by mixing it with a
//! subsystem tag and any number of indices (epoch, step, image). The same
//! path always yields the same stream, so parallel and serial execution agree.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Subsystem tags.
pub mod tag {
    pub const SAMPLER: u64 = 1;
    pub const AUGMENT: u64 = 2;
    pub const DEGRADE: u64 = 3;
    pub const PAIRS: u64 = 4;
    pub const INIT: u64 = 5;
    pub const SYNTH: u64 = 6;
    pub const PRETRAIN: u64 = 7;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(root: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(root), |acc, &p| splitmix64(acc ^ splitmix64(p.wrapping_add(0x5851_f42d))))
}

pub fn rng_for(root: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, path))
}
