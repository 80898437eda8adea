//! Seed derivation and uniform draws shared by every randomized component.
//!
//! All randomness in the crate flows through ChaCha8 streams created here.
//! Sub-streams are derived by a 64-bit avalanche mix of (seed, index), so
//! blocks, replications and multistart points can run in parallel while the
//! combined output stays identical to a sequential run.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// 64-bit finalizer mix (splitmix64): every input bit affects every output bit.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives the sub-seed of stream `index` under master seed `seed`.
pub fn sub_seed(seed: u64, index: u64) -> u64 {
    mix64(seed ^ mix64(index.wrapping_add(0x517c_c1b7_2722_0a95)))
}

/// Generator for sub-stream `index` of `seed`.
pub fn stream(seed: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(sub_seed(seed, index))
}

/// Uniform draw in the open interval (0, 1) built from the top 53 bits of one
/// 64-bit output word: u = (k + 1/2) / 2^53 with k in [0, 2^53).
pub fn standard_uniform<R: RngCore>(rng: &mut R) -> f64 {
    ((rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / 9_007_199_254_740_992.0)
}
