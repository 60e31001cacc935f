//! The single portable generator used for every random draw in the toolkit.
//!
//! ChaCha8 output is specified bit-for-bit independent of platform and word
//! size, so a seed reproduces the same splits, window origins, augmentation
//! plans and initial weights everywhere.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type SeededRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform draw from the closed-open interval `[lo, hi)`; returns `lo` when the
/// interval is empty.
pub(crate) fn uniform(rng: &mut SeededRng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Uniform integer in `0..=max`.
pub(crate) fn index_inclusive(rng: &mut SeededRng, max: usize) -> usize {
    rng.random_range(0..=max as u64) as usize
}
