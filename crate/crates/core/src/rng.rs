//! Seeded randomness.
//!
//! All simulation randomness comes from ChaCha8 streams seeded with
//! `seed_from_u64`. Gaussian variates use the ziggurat sampler of
//! `rand_distr::StandardNormal` (pinned to rand_distr 0.5) in `f64`, so a
//! given seed reproduces a trajectory on any platform. Per-trial and
//! per-replicate seeds are derived with [`derive_seed`], a SplitMix64-based
//! mixer that depends only on `(master, stream)` and never on scheduling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type SimRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// SplitMix64 finalizer.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed for stream `stream` of `master`:
/// `splitmix64(master ^ splitmix64(stream))`.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    splitmix64(master ^ splitmix64(stream))
}

#[inline]
pub fn standard_normal(rng: &mut SimRng) -> f64 {
    rng.sample(StandardNormal)
}

/// Uniform draw on `[0, 1)`.
#[inline]
pub fn uniform01(rng: &mut SimRng) -> f64 {
    rng.random::<f64>()
}

/// Fills `out` with i.i.d. Rademacher signs (±1).
pub fn fill_signs(rng: &mut SimRng, out: &mut [i8]) {
    let mut bits = 0u64;
    let mut left = 0u32;
    for s in out.iter_mut() {
        if left == 0 {
            bits = rng.random::<u64>();
            left = 64;
        }
        *s = if bits & 1 == 1 { 1 } else { -1 };
        bits >>= 1;
        left -= 1;
    }
}
