//! Small numeric helpers shared across modules.

use ndarray::Array2;
use rand::Rng;

/// Stable 64-bit hash (FNV-1a over bytes, finished with a splitmix64 mix).
/// Used to derive per-instance RNG seeds; unlike `DefaultHasher` it is
/// guaranteed identical across runs, platforms, and compiler versions.
pub fn stable_hash64(parts: &[&[u8]]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for part in parts {
        for &b in *part {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        // Separator keeps ["ab","c"] distinct from ["a","bc"].
        h ^= 0xff;
        h = h.wrapping_mul(0x100000001b3);
    }
    splitmix64(h)
}

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Standard normal sample via Box-Muller.
pub fn randn<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen_range(1e-12..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

pub fn randn_array<R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| randn(rng) * std)
}
