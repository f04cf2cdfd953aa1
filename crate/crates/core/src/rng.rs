//! Seed derivation and Gaussian sampling helpers.

use crate::real::Real;
use alloc::vec::Vec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// The generator used everywhere in the crate.
pub type DetRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> DetRng {
    DetRng::seed_from_u64(seed)
}

/// FNV-1a over the bytes of `key`.
pub fn fnv1a(key: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in key {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// splitmix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A per-item seed that depends only on the run seed and the item key, so
/// serial and parallel runs draw the same streams.
pub fn derive_seed(seed: u64, key: &[u8]) -> u64 {
    mix64(seed ^ mix64(fnv1a(key)))
}

pub fn normal_vec<T: Real, R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<T> {
    (0..n)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            T::from_f64_lossy(v)
        })
        .collect()
}
