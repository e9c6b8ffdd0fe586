//! Parameter initializers.

use rand::Rng;

use crate::tensor::Tensor;

/// Independent draws from `U(-bound, bound)`.
pub fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}
