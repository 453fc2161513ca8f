use rand::Rng;
use rand_distr::StandardNormal;

use crate::tensor::Tensor;

/// Tensor of independent `N(0, std²)` draws in row-major order.
pub(crate) fn gaussian<R: Rng>(rng: &mut R, shape: &[usize], std: f32) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let z: f32 = rng.sample(StandardNormal);
        z * std
    })
}
