//! Seeded random streams.
//!
//! Every random draw in the crate flows from a single `u64` seed through named
//! substreams so that independent stages (training, sampling, discovery)
//! never share state.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::scalar::Scalar;

pub type StreamRng = ChaCha8Rng;

/// Named stages that own separate substreams of a run seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Init = 1,
    Train = 2,
    Sample = 3,
    Discover = 4,
    Transmute = 5,
    Extend = 6,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a deterministic child seed from a parent seed and a path of keys.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix(seed), |acc, &k| splitmix(acc ^ splitmix(k)))
}

pub fn stream(seed: u64, stage: Stage, path: &[u64]) -> StreamRng {
    let mut keys = Vec::with_capacity(path.len() + 1);
    keys.push(stage as u64);
    keys.extend_from_slice(path);
    StreamRng::seed_from_u64(derive_seed(seed, &keys))
}

/// Source of standard normal draws. Samplers take this instead of a raw RNG
/// so tests can substitute deterministic noise.
pub trait NoiseSource<S> {
    fn fill_normal(&mut self, out: &mut [S]);
}

impl<S: Scalar, R: Rng> NoiseSource<S> for R {
    fn fill_normal(&mut self, out: &mut [S]) {
        for v in out {
            let z: f64 = self.sample(StandardNormal);
            *v = S::of(z);
        }
    }
}

/// Noise source that always yields zeros.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroNoise;

impl<S: Scalar> NoiseSource<S> for ZeroNoise {
    fn fill_normal(&mut self, out: &mut [S]) {
        out.fill(S::zero());
    }
}

pub fn normal_vec<S: Scalar>(rng: &mut impl NoiseSource<S>, n: usize) -> Vec<S> {
    let mut v = vec![S::zero(); n];
    rng.fill_normal(&mut v);
    v
}
