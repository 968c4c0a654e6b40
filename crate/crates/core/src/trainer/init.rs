use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Fan-in and fan-out of a weight shape.
///
/// Matrices are `[in, out]`; higher ranks are convolution kernels whose
/// leading axes form the receptive field and whose last two axes are
/// `[in_channels, out_channels]`.
pub fn fans(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [n] => (*n, *n),
        [rest @ .., i, o] => {
            let field: usize = rest.iter().product();
            (field * i, field * o)
        }
    }
}

/// Uniform sample on `±sqrt(3 α / n)` with `n = (fan_in + fan_out) / 2`.
pub fn init_uniform(shape: &[usize], fan_in: usize, fan_out: usize, alpha: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let n_init = (fan_in + fan_out) as f64 / 2.0;
    if n_init == 0.0 {
        return Err(Error::config("init", format!("zero fan for shape {shape:?}")));
    }
    let bound = (3.0 * alpha / n_init).sqrt();
    let len = shape.iter().product();
    let data = (0..len).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data)
}

/// Fan-average uniform initialization using [`fans`].
pub fn init_fan_avg(shape: &[usize], alpha: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let (fan_in, fan_out) = fans(shape);
    init_uniform(shape, fan_in, fan_out, alpha, rng)
}

/// Routing kernels `[N, O_H, I_D, O_D]` are stacks of independent
/// `I_D × O_D` matrices, so each is initialized with its own fans.
pub fn init_routing_kernel(shape: &[usize; 4], alpha: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    init_uniform(shape, shape[2], shape[3], alpha, rng)
}
