//! Seeded parameter initialization: weights uniform in ±1/sqrt(fan_in),
//! biases zero.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Scalar, Tensor};

/// Uniform(-bound, bound) tensor with bound = 1/sqrt(fan_in).
pub fn uniform_fan_in<S: Scalar>(shape: Vec<usize>, fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<S> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data = (0..numel)
        .map(|_| S::from_f64(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::new(shape, data).expect("shape/data consistent by construction")
}

/// Standard normal samples scaled by `std`.
pub fn normal<S: Scalar>(shape: Vec<usize>, std: f64, rng: &mut ChaCha8Rng) -> Tensor<S> {
    let numel: usize = shape.iter().product();
    let data = (0..numel)
        .map(|_| S::from_f64(std * gaussian(rng)))
        .collect();
    Tensor::new(shape, data).expect("shape/data consistent by construction")
}

/// Box-Muller; two uniforms in, one normal out. Keeps rand_distr out of the
/// dependency tree for the one place a gaussian is needed.
pub fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
