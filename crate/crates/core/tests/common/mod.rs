#![allow(dead_code)]

use qrlora::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

/// Product of random `rows × k` and `k × cols` factors: rank at most `k`.
pub fn low_rank(rng: &mut impl Rng, rows: usize, cols: usize, k: usize) -> Matrix {
    uniform(rng, rows, k).matmul(&uniform(rng, k, cols)).unwrap()
}

/// The random factorization corpus: mixed shapes up to 64×48, a share of
/// rank-deficient inputs and inputs scaled by 1e±6.
pub fn corpus(seed: u64, n: usize) -> Vec<Matrix> {
    let mut r = rng(seed);
    (0..n)
        .map(|i| {
            let (rows, cols) = match i {
                0 => (1, 1),
                1 => (64, 48),
                2 => (48, 64),
                _ => (r.gen_range(1..=64), r.gen_range(1..=48)),
            };
            let mut w = match i % 4 {
                1 => {
                    let k = r.gen_range(1..=rows.min(cols));
                    low_rank(&mut r, rows, cols, k)
                }
                _ => uniform(&mut r, rows, cols),
            };
            if i % 5 == 3 {
                w = w.scale(1e6);
            } else if i % 5 == 4 {
                w = w.scale(1e-6);
            }
            w
        })
        .collect()
}
