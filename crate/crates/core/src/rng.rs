//! Seeded randomness. Every random draw in the crate flows through a
//! [`ChaCha8Rng`] built here, so a seed fixes every number bit-for-bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Tensor;

pub type SeededRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A sub-seed for an independent stream, e.g. one per sweep cell.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    seed.wrapping_add(stream)
}

/// Normal(0, std) draws, redrawn until they fall within two standard
/// deviations.
pub fn truncated_normal(rng: &mut SeededRng, shape: &[usize], std: f64) -> Tensor {
    let normal = Normal::new(0.0, std).expect("std must be finite and positive");
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let x: f64 = normal.sample(rng);
            if x.abs() <= 2.0 * std {
                break x;
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape and data agree")
}

/// Uniform draws in `[lo, hi)`.
pub fn uniform(rng: &mut SeededRng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape, data).expect("shape and data agree")
}
