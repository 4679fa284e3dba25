#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use swinca_core::{Element, Shape, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform entries in `[-1, 1)`.
pub fn uniform<T: Element>(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let data = (0..shape.numel()).map(|_| T::from_f64(rng.random_range(-1.0..1.0))).collect();
    Tensor::from_vec(shape, data).unwrap()
}

pub fn binary(len: usize, p: f64, rng: &mut ChaCha8Rng) -> Vec<f32> {
    (0..len).map(|_| if rng.random_bool(p) { 1.0 } else { 0.0 }).collect()
}
