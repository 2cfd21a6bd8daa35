use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::numcore::tensor::Tensor;

pub type SeededRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_tensor(rng: &mut SeededRng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("std is finite and positive");
    Tensor::from_fn(shape, |_| dist.sample(rng))
}

/// Normal samples redrawn until they fall within two standard deviations.
pub fn trunc_normal_tensor(rng: &mut SeededRng, shape: &[usize], std: f64) -> Tensor {
    Tensor::from_fn(shape, |_| loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            break z * std;
        }
    })
}

pub fn uniform_tensor(rng: &mut SeededRng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}
