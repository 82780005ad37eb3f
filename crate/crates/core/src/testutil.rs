//! Shared helpers for unit tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dtrace::CovarianceFactor;
use crate::linalg::DenseMatrix;
use crate::reduction::SparsityPattern;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_vec(r: &mut impl Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| r.gen_range(-1.0..1.0)).collect()
}

/// Factor of uniform entries, rows normalized so that variances are O(1).
pub fn random_factor(p: usize, n: usize, seed: u64) -> CovarianceFactor {
    let mut r = rng(seed);
    CovarianceFactor::new(DenseMatrix::from_fn(p, n, |_, _| r.gen_range(-1.0..1.0)))
}

pub fn random_symmetric(p: usize, seed: u64) -> DenseMatrix {
    let mut r = rng(seed);
    let mut m = DenseMatrix::from_fn(p, p, |_, _| r.gen_range(-1.0..1.0));
    m.symmetrize();
    m
}

pub fn random_pattern(r: &mut impl Rng, p: usize, density: f64) -> SparsityPattern {
    let mut kept = Vec::new();
    for i in 0..p {
        for j in i..p {
            if i == j || r.gen_bool(density) {
                kept.push((i, j));
            }
        }
    }
    SparsityPattern::new(p, kept).unwrap()
}
