//! Seeding and sampling helpers.
//!
//! All randomness flows through ChaCha8 streams so that every run is a pure
//! function of (seed, config, dataset). Worker-level parallelism (episode
//! rollouts, sweep points) derives one stream per unit of work, which makes
//! results independent of scheduling order.

use crate::tensor::{Real, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type LabRng = ChaCha8Rng;

/// Root RNG for a run.
pub fn root(seed: u64) -> LabRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream `stream` of the run seeded by `seed`.
///
/// ChaCha streams are statistically independent, so (seed, stream) pairs can
/// be handed to parallel workers without coordination.
pub fn stream(seed: u64, stream: u64) -> LabRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Uniform draw in [0, 1).
pub fn uniform<F: Real>(rng: &mut LabRng) -> F {
    F::from_f64(rng.gen::<f64>())
}

/// Standard normal draws via Box-Muller.
///
/// Draws are generated at f64 and converted, so f32 and f64 runs consume the
/// underlying stream identically.
pub fn fill_standard_normal<F: Real>(rng: &mut LabRng, out: &mut [F]) {
    let mut i = 0;
    while i < out.len() {
        let u1: f64 = 1.0 - rng.gen::<f64>(); // (0, 1]: keeps ln finite
        let u2: f64 = rng.gen();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        out[i] = F::from_f64(r * theta.cos());
        if i + 1 < out.len() {
            out[i + 1] = F::from_f64(r * theta.sin());
        }
        i += 2;
    }
}

pub fn standard_normal_tensor<F: Real>(rng: &mut LabRng, rows: usize, cols: usize) -> Tensor<F> {
    let mut t = Tensor::zeros(rows, cols);
    fill_standard_normal(rng, t.data_mut());
    t
}

/// Deterministic 64-bit FNV-1a hash, used for config fingerprints in
/// checkpoints and metrics (std's SipHash is randomly keyed per process).
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
