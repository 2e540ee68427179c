use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::numeric::Matrix;

/// The one RNG used across the crate; every sampler takes it explicitly.
pub type SeededRng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Glorot-uniform matrix in `±√(6 / (rows + cols))`, deterministic in `seed`.
pub fn xavier_init(rows: usize, cols: usize, seed: u64) -> Matrix {
    xavier_with_rng(rows, cols, &mut seeded_rng(seed))
}

pub fn xavier_with_rng<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    let bound = xavier_bound(rows, cols);
    uniform_with_rng(rows, cols, bound, rng)
}

pub fn xavier_bound(rows: usize, cols: usize) -> f64 {
    (6.0 / (rows + cols).max(1) as f64).sqrt()
}

pub fn uniform_with_rng<R: Rng + ?Sized>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    Matrix::from_vec(rows, cols, data).expect("length matches shape")
}
