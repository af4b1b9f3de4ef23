//! Seeded randomness helpers. Everything downstream derives its stream from
//! a u64 seed so runs are reproducible bit for bit.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type PoseRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> PoseRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Deterministically derive an independent stream, e.g. per shard or stage.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().unwrap())
}

/// Standard normal tensor via Box-Muller (keeps us off distribution-crate
/// version churn and is identical across platforms).
pub fn randn(rng: &mut PoseRng, shape: &[usize]) -> ArrayD<f64> {
    let n: usize = shape.iter().product();
    let mut v = Vec::with_capacity(n);
    while v.len() < n {
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let r = (-2.0 * u1.ln()).sqrt();
        let th = 2.0 * std::f64::consts::PI * u2;
        v.push(r * th.cos());
        if v.len() < n {
            v.push(r * th.sin());
        }
    }
    ArrayD::from_shape_vec(IxDyn(shape), v).unwrap()
}

pub fn uniform(rng: &mut PoseRng, lo: f64, hi: f64) -> f64 {
    rng.gen_range(lo..hi)
}
