//! Seeded random streams.
//!
//! Every random draw in this crate comes from a ChaCha8 stream opened with
//! [`stream`]. ChaCha8 is a published counter-based generator, and the key
//! layout below is part of the crate's contract: a reimplementation in any
//! language that builds the same 32-byte key and reads the same words gets
//! bit-identical values. Streams are keyed by `(seed, domain, a, b)` rather
//! than drawn from one sequential generator, so generation order never
//! matters (points, samples and axes can be produced in any order or in
//! parallel without changing a single bit).

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::math;

/// Domain separation tags (third key word). One per use site.
pub mod domain {
    /// Additive Gaussian noise on point coordinates.
    pub const NOISE: u64 = 1;
    /// Identity basis coefficients of a synthetic face.
    pub const IDENTITY: u64 = 2;
    /// Per-sample expression perturbation field.
    pub const EXPRESSION: u64 = 3;
    /// Per-sample surface sampling jitter.
    pub const SAMPLE: u64 = 4;
    /// Network weight initialization.
    pub const INIT: u64 = 5;
    /// Epoch shuffling of training samples.
    pub const SHUFFLE: u64 = 6;
    /// Dropout masks.
    pub const DROPOUT: u64 = 7;
    /// Point subsampling for the recognizer.
    pub const SUBSAMPLE: u64 = 8;
    /// Train/test split construction.
    pub const SPLIT: u64 = 9;
    /// Per-sample noise level selection during denoiser training.
    pub const LEVEL: u64 = 10;
}

/// Open the ChaCha8 stream keyed by `(seed, domain, a, b)`.
///
/// Key layout: 32 bytes = LE64(seed) || LE64(domain) || LE64(a) || LE64(b).
pub fn stream(seed: u64, domain: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&domain.to_le_bytes());
    key[16..24].copy_from_slice(&a.to_le_bytes());
    key[24..32].copy_from_slice(&b.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Map a raw word to a uniform draw in (0, 1]: top 53 bits, plus one, scaled
/// by 2^-53. The +1 keeps ln() finite.
#[inline]
pub fn unit_open_closed(bits: u64) -> f64 {
    ((bits >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Map a raw word to a uniform draw in [0, 1): top 53 bits scaled by 2^-53.
#[inline]
pub fn unit_closed_open(bits: u64) -> f64 {
    (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// One standard normal draw by the Box–Muller transform.
///
/// Consumes exactly two words: `u1 ∈ (0,1]` then `u2 ∈ [0,1)`, returning
/// `sqrt(-2 ln u1) · cos(2π u2)`.
pub fn standard_normal<R: RngCore>(rng: &mut R) -> f64 {
    let u1 = unit_open_closed(rng.next_u64());
    let u2 = unit_closed_open(rng.next_u64());
    math::sqrt(-2.0 * math::ln(u1)) * math::cos(2.0 * core::f64::consts::PI * u2)
}

/// Uniform draw in [lo, hi).
pub fn uniform<R: RngCore>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * unit_closed_open(rng.next_u64())
}

/// `count` distinct indices out of `0..n`, by partial Fisher–Yates.
pub fn subsample_indices<R: RngCore>(rng: &mut R, n: usize, count: usize) -> alloc::vec::Vec<usize> {
    assert!(count <= n, "cannot pick {count} of {n}");
    let mut pool: alloc::vec::Vec<usize> = (0..n).collect();
    for i in 0..count {
        let j = i + (rng.next_u64() as usize) % (n - i);
        pool.swap(i, j);
    }
    pool.truncate(count);
    pool
}

/// In-place Fisher–Yates shuffle.
pub fn shuffle<T, R: RngCore>(rng: &mut R, items: &mut [T]) {
    let n = items.len();
    if n < 2 {
        return;
    }
    for i in (1..n).rev() {
        let j = (rng.next_u64() as usize) % (i + 1);
        items.swap(i, j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec::Vec;

    #[test]
    fn streams_are_reproducible_and_keyed() {
        let a: Vec<u64> = {
            let mut r = stream(7, domain::NOISE, 1, 2);
            (0..4).map(|_| r.next_u64()).collect()
        };
        let b: Vec<u64> = {
            let mut r = stream(7, domain::NOISE, 1, 2);
            (0..4).map(|_| r.next_u64()).collect()
        };
        assert_eq!(a, b);
        let mut c = stream(7, domain::NOISE, 1, 3);
        assert_ne!(a[0], c.next_u64());
    }

    #[test]
    fn unit_ranges() {
        assert_eq!(unit_closed_open(0), 0.0);
        assert!(unit_closed_open(u64::MAX) < 1.0);
        assert!(unit_open_closed(0) > 0.0);
        assert_eq!(unit_open_closed(u64::MAX), 1.0);
    }

    #[test]
    fn normal_moments_are_sane() {
        let mut r = stream(11, domain::NOISE, 0, 0);
        let n = 200_000;
        let mut sum = 0.0;
        let mut sq = 0.0;
        for _ in 0..n {
            let z = standard_normal(&mut r);
            sum += z;
            sq += z * z;
        }
        let mean = sum / n as f64;
        let var = sq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn subsample_is_distinct_and_in_range() {
        let mut r = stream(3, domain::SUBSAMPLE, 0, 0);
        let picks = subsample_indices(&mut r, 50, 20);
        assert_eq!(picks.len(), 20);
        let mut sorted = picks.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 20);
        assert!(sorted.iter().all(|&i| i < 50));
    }

    #[test]
    fn shuffle_permutes() {
        let mut r = stream(5, domain::SHUFFLE, 0, 0);
        let mut v: Vec<usize> = (0..100).collect();
        shuffle(&mut r, &mut v);
        let mut s = v.clone();
        s.sort_unstable();
        assert_eq!(s, (0..100).collect::<Vec<_>>());
        assert_ne!(v, (0..100).collect::<Vec<_>>());
    }
}
