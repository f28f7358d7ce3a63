//! Hierarchical, counter-based seed derivation.
//!
//! Every random draw in the crate is keyed by a path such as
//! `(run, epoch, batch, image, slot)`, so results never depend on the order in
//! which independent pieces of work are scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for the child `index` of `parent`.
#[inline]
pub fn child(parent: u64, index: u64) -> u64 {
    mix64(parent ^ mix64(index.wrapping_add(0x5851_F42D_4C95_7F2D)))
}

pub fn derive(root: u64, path: &[u64]) -> u64 {
    path.iter().fold(mix64(root), |acc, &i| child(acc, i))
}

pub fn rng(root: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(root, path))
}

/// Named streams so unrelated consumers of one run seed never collide.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const AUGMENT: u64 = 2;
    pub const ATTACK: u64 = 3;
    pub const SHUFFLE: u64 = 4;
    pub const PROBE: u64 = 5;
    pub const EVAL: u64 = 6;
    pub const DATA: u64 = 7;
    pub const SUITE: u64 = 8;
}
