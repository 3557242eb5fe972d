//! Seeded inputs shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A diagonal-plus-rank-`k` precision with `m` dimensions.
pub fn precision(m: usize, k: usize, seed: u64) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mut r = rng(seed);
    let d = (0..m).map(|_| r.random_range(0.5..2.0)).collect();
    let v = (0..k)
        .map(|_| (0..m).map(|_| StandardNormal.sample(&mut r)).collect())
        .collect();
    (d, v)
}

/// `t` rows of iid standard normals with `m` columns.
pub fn white_noise(t: usize, m: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng(seed);
    (0..t)
        .map(|_| (0..m).map(|_| StandardNormal.sample(&mut r)).collect())
        .collect()
}
