//! Seeded parameter initialization.
//!
//! Each parameter draws from its own SplitMix64 stream keyed by `(seed, name)`,
//! so adding or removing a parameter never shifts the values of the others.

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::SplitMix64;

use super::{Parameter, Scalar, Tensor};

/// FNV-1a over the name, folded with the run seed.
pub fn stream_seed(seed: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h ^ seed.rotate_left(32)
}

pub fn param_rng(seed: u64, name: &str) -> SplitMix64 {
    SplitMix64::seed_from_u64(stream_seed(seed, name))
}

/// He-normal weights: `N(0, 2 / fan_in)`.
pub fn he_normal<S: Scalar>(name: &str, shape: &[usize], fan_in: usize, seed: u64) -> Parameter<S> {
    let mut rng = param_rng(seed, name);
    let std = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            S::from_f64(z * std)
        })
        .collect();
    Parameter::new(name, Tensor::new(shape.to_vec(), data).expect("shape covers data"))
}

pub fn zeros<S: Scalar>(name: &str, shape: &[usize]) -> Parameter<S> {
    Parameter::new(name, Tensor::zeros(shape))
}
