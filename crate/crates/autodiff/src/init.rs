//! Parameter initializers.

use rand::Rng;

use crate::tensor::Tensor;

/// Uniform in `±gain·sqrt(3 / fan_in)`, i.e. variance `gain² / fan_in`.
///
/// Use `gain = √2` in front of a ReLU and `1` for output layers.
pub fn fan_in_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, gain: f64, rng: &mut R) -> Tensor {
    let bound = gain * (3.0 / fan_in.max(1) as f64).sqrt();
    let numel = shape.iter().product();
    let values = (0..numel).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::from_parts(shape.to_vec(), values)
}
