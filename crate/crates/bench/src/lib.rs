//! Seeded inputs shared by the benchmarks.

use angioseg_core::{BinaryMask, Spacing, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// A disc of radius `side / 4` plus scattered foreground pixels.
pub fn blob_mask(side: usize, seed: u64) -> BinaryMask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = side as f64 / 2.0;
    let r2 = (side as f64 / 4.0).powi(2);
    let data = (0..side * side)
        .map(|i| {
            let (y, x) = ((i / side) as f64 - c, (i % side) as f64 - c);
            (y * y + x * x <= r2 || rng.random_bool(0.02)) as u8
        })
        .collect();
    BinaryMask::new(side, side, data, Spacing::isotropic(0.3)).expect("square mask")
}

pub fn probability_values(n: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| if rng.random_bool(0.1) { rng.random_range(0.6..1.0) } else { rng.random_range(0.0..0.4) })
        .collect()
}
