//! Seeded random streams.
//!
//! Every run derives its randomness from a single seed, fanned out into
//! named ChaCha streams so that changing how one stage consumes randomness
//! never perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Named randomness consumers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    World = 1,
    Sampler = 2,
    Init = 3,
    Trials = 4,
    Probe = 5,
}

/// A ChaCha generator on the sub-stream `stream` of `seed`.
pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Standard-normal draw, always sampled at f64 so the stream consumption is
/// identical regardless of the scalar type being filled.
pub fn normal_f64(rng: &mut ChaCha8Rng) -> f64 {
    use rand_distr::Distribution;
    rand_distr::StandardNormal.sample(rng)
}

/// Uniform draw in `[-limit, limit]` at f64.
pub fn uniform_f64(rng: &mut ChaCha8Rng, limit: f64) -> f64 {
    use rand::Rng;
    rng.random_range(-limit..limit)
}

pub fn normal_tensor<S: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize, sigma: f64) -> Tensor<S> {
    let mut t = Tensor::zeros(rows, cols);
    for v in t.data_mut() {
        *v = S::of_f64(sigma * normal_f64(rng));
    }
    t
}
