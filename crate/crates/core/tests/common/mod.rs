//! Shared helpers for integration tests: seeded random matrices.

use lrsl_core::Matrix;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        std * z
    })
}

/// Random matrix of rank at most `rank`, built as a product of two
/// Gaussian factors.
pub fn rank_deficient_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, rank: usize) -> Matrix {
    let left = gaussian_matrix(rng, rows, rank, 1.0);
    let right = gaussian_matrix(rng, rank, cols, 1.0);
    left.matmul(&right).expect("factor shapes agree")
}
