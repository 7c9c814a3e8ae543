//! Seed derivation and random draws.
//!
//! Every random consumer in the lab gets its own ChaCha8 stream whose seed is
//! derived from a master seed plus a purpose tag and an index, so runs are
//! reproducible and independent streams never overlap by construction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type LabRng = ChaCha8Rng;

/// Purpose tags for derived streams.
pub mod tag {
    pub const CANDIDATE: u64 = 0x0001;
    pub const LOSS: u64 = 0x0002;
    pub const EVAL: u64 = 0x0003;
    pub const INIT: u64 = 0x0004;
    pub const PRETRAIN: u64 = 0x0005;
    pub const DATA: u64 = 0x0006;
    pub const REFL: u64 = 0x0007;
    pub const SHUFFLE: u64 = 0x0008;
    pub const SPECS: u64 = 0x0009;
    pub const RM_EVAL: u64 = 0x000a;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from `(master, tag, index)`.
pub fn derive_seed(master: u64, tag: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(master) ^ tag) ^ index)
}

pub fn rng_from_seed(seed: u64) -> LabRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn derived_rng(master: u64, tag: u64, index: u64) -> LabRng {
    rng_from_seed(derive_seed(master, tag, index))
}

pub fn normal_vec<R: Rng + ?Sized>(rng: &mut R, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}
