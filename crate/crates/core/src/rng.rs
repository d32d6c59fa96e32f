//! Seeded random streams.
//!
//! All randomness derives from a `u64` seed plus a stream id so results do
//! not depend on evaluation order or worker count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensor::{Real, Tensor};

pub type StreamRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream `stream` of `seed`.
pub fn stream(seed: u64, stream: u64) -> StreamRng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// SplitMix64 finalizer, used to derive child seeds.
pub fn mix(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn normal<F: Real, R: Rng + ?Sized>(rng: &mut R) -> F {
    let v: f64 = rng.sample(StandardNormal);
    F::lit(v)
}

pub fn normal_tensor<F: Real>(rng: &mut impl Rng, shape: &[usize]) -> Tensor<F> {
    Tensor::from_fn(shape, |_| normal(rng))
}

pub fn uniform_tensor<F: Real>(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<F> {
    Tensor::from_fn(shape, |_| F::lit(rng.random_range(lo..hi)))
}
