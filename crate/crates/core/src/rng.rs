//! Seeded random-stream derivation for reproducible parallel Monte Carlo.
//!
//! Every independent task (scenario draw, coherence block, norm-constant
//! estimation, ...) gets its own ChaCha8 stream derived from the master seed
//! and a context path of integers: `derive_rng(seed, &[BLOCK, scenario, block])`.
//! Results are therefore identical for any thread count and any scheduling
//! order, and tasks can run in parallel without sharing generator state.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::f64::consts::FRAC_1_SQRT_2;

/// Context tags used as the first word of a derivation path.
pub mod stream {
    pub const SCENARIO: u64 = 0x01;
    pub const BLOCK: u64 = 0x02;
    pub const T_CONST: u64 = 0x03;
    pub const ZF_NORM: u64 = 0x04;
    pub const MEAN_MC: u64 = 0x05;
    pub const DATASET_SCENARIO: u64 = 0x06;
    pub const DATASET_BLOCK: u64 = 0x07;
    pub const TRAIN: u64 = 0x08;
    pub const CALIBRATION: u64 = 0x09;
    pub const GENERIC: u64 = 0x0a;
}

#[inline]
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive an independent ChaCha8 stream from the master `seed` and a context
/// `path`. The stream id is a splitmix64 hash chain over the seed and the
/// path words, expanded to the full 256-bit ChaCha key.
pub fn derive_rng(seed: u64, path: &[u64]) -> ChaCha8Rng {
    let mut acc = seed;
    let _ = splitmix64(&mut acc);
    for &word in path {
        acc ^= word.wrapping_mul(0xD6E8_FEB8_6659_FD93);
        let _ = splitmix64(&mut acc);
    }
    let mut key = [0u8; 32];
    let mut s = acc;
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut s).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// One draw of a standard circularly-symmetric complex Gaussian: real and
/// imaginary parts are independent N(0, 1/2), so E{|z|^2} = 1.
#[inline]
pub fn standard_complex<R: Rng + ?Sized>(rng: &mut R) -> Complex64 {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(re * FRAC_1_SQRT_2, im * FRAC_1_SQRT_2)
}

/// A vector of `m` i.i.d. standard circularly-symmetric complex Gaussians.
pub fn standard_complex_vector<R: Rng + ?Sized>(m: usize, rng: &mut R) -> Vec<Complex64> {
    (0..m).map(|_| standard_complex(rng)).collect()
}

/// Map `0..n` in fixed-size batches, in parallel, returning batch results in
/// index order. Reductions over the returned vector are therefore identical
/// for every thread count.
pub fn parallel_batches<T, F>(n: usize, batch_size: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(std::ops::Range<usize>) -> T + Sync,
{
    use rayon::prelude::*;
    assert!(batch_size > 0);
    let n_batches = n.div_ceil(batch_size);
    (0..n_batches)
        .into_par_iter()
        .map(|b| {
            let start = b * batch_size;
            let end = (start + batch_size).min(n);
            f(start..end)
        })
        .collect()
}
