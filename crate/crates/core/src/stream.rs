//! Counter-based random streams.
//!
//! Every random draw in the pipeline is addressed by a key built from the
//! run seed and the draw's coordinates (stage, voxel, step, ...). A key seeds
//! a SplitMix64 generator, so results never depend on traversal order or
//! thread scheduling.

use rand::SeedableRng;
use rand_xoshiro::SplitMix64;

/// Name recorded in run manifests.
pub const RNG_NAME: &str = "splitmix64-keyed (rand_xoshiro::SplitMix64 seeded by splitmix64-finalizer key fold)";

/// Stream domains, kept distinct so two subsystems never share draws.
pub mod domain {
    pub const RECIPE: u64 = 0x7265_6369_7065;
    pub const STAGE: u64 = 0x7374_6167_65;
    pub const PHANTOM: u64 = 0x7068_616e_746f_6d;
    pub const TEXTURE: u64 = 0x7465_7874_7572_65;
    pub const INIT: u64 = 0x696e_6974;
    pub const BATCH: u64 = 0x6261_7463_68;
    pub const VALIDATION: u64 = 0x7661_6c69_64;
    pub const MATRIX: u64 = 0x6d61_7472_6978;
    pub const STABILITY: u64 = 0x7374_6162_6c65;
    pub const EXTERNAL: u64 = 0x6578_7465_726e;
}

#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds an ordered list of coordinates into a single 64-bit key.
pub fn key(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x243F_6A88_85A3_08D3, |acc, &p| mix64(acc ^ mix64(p)))
}

/// Stable 64-bit digest of a string identifier.
pub fn key_str(s: &str) -> u64 {
    s.bytes()
        .fold(0xCBF2_9CE4_8422_2325u64, |acc, b| mix64(acc ^ b as u64))
}

pub fn rng(key: u64) -> SplitMix64 {
    SplitMix64::seed_from_u64(key)
}
