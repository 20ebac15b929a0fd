use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::autodiff::{Real, Tensor};

/// Entries drawn from `U(-bound, bound)`.
pub fn uniform<R: Real>(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor<R> {
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Tensor::from_fn(shape, |_| R::lit(dist.sample(rng)))
}

/// Entries drawn from `N(0, std^2)`.
pub fn normal<R: Real>(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor<R> {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| R::lit(dist.sample(rng)))
}
