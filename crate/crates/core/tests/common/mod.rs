#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vql_core::numerics::{BinaryMask, ConvKernel, FeatureMap, KernelShape, ScoreMap};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn feature(rng: &mut impl Rng, h: usize, w: usize, c: usize) -> FeatureMap {
    FeatureMap::new(h, w, c, uniform_vec(rng, h * w * c)).unwrap()
}

pub fn kernel(rng: &mut impl Rng, k: usize, cin: usize, cout: usize) -> ConvKernel {
    let shape = KernelShape::new(k, cin, cout).unwrap();
    ConvKernel::new(shape, uniform_vec(rng, shape.len())).unwrap()
}

pub fn unit_scores(rng: &mut impl Rng, h: usize, w: usize) -> ScoreMap {
    ScoreMap::new(h, w, (0..h * w).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
}

pub fn mask(rng: &mut impl Rng, h: usize, w: usize, p: f64) -> BinaryMask {
    BinaryMask::new(h, w, (0..h * w).map(|_| rng.random_bool(p)).collect()).unwrap()
}

/// Norm-wise relative error `|a - b| / |b|`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let base: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / base
}
