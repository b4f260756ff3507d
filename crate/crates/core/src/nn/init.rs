//! Weight initialization. Everything draws from a caller-supplied RNG so a
//! model build is a pure function of its seed.

use ndarray::IxDyn;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Arr;

/// Normal(0, sigma) resampled until |x| <= 2 sigma.
pub fn trunc_normal(rng: &mut impl Rng, shape: &[usize], sigma: f64) -> Arr {
    let dist = Normal::new(0.0, sigma).unwrap();
    Arr::from_shape_fn(IxDyn(shape), |_| loop {
        let x = dist.sample(rng);
        if x.abs() <= 2.0 * sigma {
            return x;
        }
    })
}

/// He (Kaiming) normal for conv/linear stacks: std = sqrt(2 / fan_in).
pub fn he_normal(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Arr {
    let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
    Arr::from_shape_fn(IxDyn(shape), |_| dist.sample(rng))
}

pub fn normal(rng: &mut impl Rng, shape: &[usize], sigma: f64) -> Arr {
    let dist = Normal::new(0.0, sigma).unwrap();
    Arr::from_shape_fn(IxDyn(shape), |_| dist.sample(rng))
}

pub fn zeros(shape: &[usize]) -> Arr {
    Arr::zeros(IxDyn(shape))
}

pub fn ones(shape: &[usize]) -> Arr {
    Arr::ones(IxDyn(shape))
}
