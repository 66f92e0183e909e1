//! Explicit, splittable random streams.
//!
//! Every sampling routine takes its generator as an argument; there is no
//! global RNG. A `(seed, stream)` pair identifies an independent ChaCha
//! stream, so a worker or a chunk index can derive its own generator without
//! coordinating with anyone else.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::{Scalar, Tensor};

pub type Rng = ChaCha8Rng;

/// Generator for stream `stream` under `seed`.
pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal<S: Scalar>(rng: &mut Rng) -> S {
    let z: f64 = StandardNormal.sample(rng);
    S::from_f64(z)
}

pub fn normal_vec<S: Scalar>(rng: &mut Rng, n: usize) -> Vec<S> {
    (0..n).map(|_| normal(rng)).collect()
}

pub fn randn<S: Scalar>(rng: &mut Rng, shape: &[usize]) -> Tensor<S> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), normal_vec(rng, n)).expect("shape product matches length")
}
