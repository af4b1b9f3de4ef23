//! Linear-interpolation flow matching: forward process, velocity targets,
//! score conversion, diffusion loss and Euler ODE sampling.
//!
//! The forward process is `x_t = (1-t) x0 + t eps` with `t = 1` the pure-noise
//! endpoint. A velocity field `mu(x_t, t, cond)` approximates `eps - x0`; its
//! score is recovered as `s = -(x_t + (1-t) mu) / t`.

use crate::tensor::Tensor;
use crate::{PoseError, Result};

/// Noise level in `[0, 1]`; `t = 1` is pure noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseLevel(f64);

impl NoiseLevel {
    pub fn new(t: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&t) || !t.is_finite() {
            return Err(PoseError::InvalidArgument(format!(
                "noise level must lie in [0, 1], got {t}"
            )));
        }
        Ok(NoiseLevel(t))
    }

    pub fn value(&self) -> f64 {
        self.0
    }

    /// Endpoint of the trajectory, pure noise.
    pub const ENDPOINT: NoiseLevel = NoiseLevel(1.0);
}

/// Conditioning passed to a velocity field: the conditional frame(s) plus a
/// per-frame binary mask marking which frames are conditional.
#[derive(Clone)]
pub struct Conditioning {
    /// (batch, channels, height, width) conditional frame
    pub frame: Tensor,
    /// per-frame mask, 1.0 = conditional frame
    pub mask: Vec<f64>,
    /// scene attribute vectors, one per batch element (used by the
    /// discriminator head, not the backbone)
    pub attributes: Vec<Vec<f64>>,
}

/// A velocity parameterization `mu(x_t, t, cond)`.
///
/// `ts` holds one noise level per batch element, or a single value applied to
/// the whole batch. Output shape must equal the input shape.
pub trait Velocity {
    fn velocity(&self, x_t: &Tensor, ts: &[f64], cond: Option<&Conditioning>) -> Tensor;
}

/// A velocity field given by a closure; used for analytic oracles in tests.
pub struct FnVelocity<F: Fn(&Tensor, &[f64]) -> Tensor>(pub F);

impl<F: Fn(&Tensor, &[f64]) -> Tensor> Velocity for FnVelocity<F> {
    fn velocity(&self, x_t: &Tensor, ts: &[f64], _cond: Option<&Conditioning>) -> Tensor {
        (self.0)(x_t, ts)
    }
}

fn check_same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(PoseError::ShapeMismatch(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Reshape a per-sample scalar vector to (B, 1, 1, ...) for broadcasting
/// against a batch-leading tensor.
pub fn per_sample(ts: &[f64], like: &Tensor) -> Tensor {
    let b = like.shape()[0];
    assert!(
        ts.len() == b || ts.len() == 1,
        "need {b} or 1 noise levels, got {}",
        ts.len()
    );
    let mut shape = vec![1usize; like.shape().len()];
    let vals: Vec<f64> = if ts.len() == 1 {
        vec![ts[0]; 1]
    } else {
        shape[0] = b;
        ts.to_vec()
    };
    Tensor::new(ndarray::ArrayD::from_shape_vec(ndarray::IxDyn(&shape), vals).unwrap())
}

/// `(1-t) x0 + t eps`, elementwise.
pub fn interpolate(x0: &Tensor, eps: &Tensor, t: NoiseLevel) -> Result<Tensor> {
    check_same_shape(x0, eps, "interpolate")?;
    let t = t.value();
    Ok(x0.mul_scalar(1.0 - t).add(&eps.mul_scalar(t)))
}

/// Per-sample variant: one noise level per batch element.
pub fn interpolate_per_sample(x0: &Tensor, eps: &Tensor, ts: &[f64]) -> Result<Tensor> {
    check_same_shape(x0, eps, "interpolate")?;
    for &t in ts {
        NoiseLevel::new(t)?;
    }
    let tt = per_sample(ts, x0);
    let one_minus = tt.neg().add_scalar(1.0);
    Ok(x0.mul(&one_minus).add(&eps.mul(&tt)))
}

/// The flow-matching regression target `eps - x0`.
pub fn velocity_target(x0: &Tensor, eps: &Tensor) -> Result<Tensor> {
    check_same_shape(x0, eps, "velocity_target")?;
    Ok(eps.sub(x0))
}

/// One (x0, eps, t) training triple.
pub struct FlowBatch {
    pub x0: Tensor,
    pub eps: Tensor,
    pub ts: Vec<f64>,
    pub cond: Option<Conditioning>,
}

/// Mean over batch and elements of `||(eps - x0) - mu(x_t, t)||^2`.
pub fn diffusion_loss(model: &dyn Velocity, batch: &FlowBatch) -> Result<Tensor> {
    check_same_shape(&batch.x0, &batch.eps, "diffusion_loss")?;
    let x_t = interpolate_per_sample(&batch.x0, &batch.eps, &batch.ts)?;
    let target = velocity_target(&batch.x0, &batch.eps)?;
    let mu = model.velocity(&x_t, &batch.ts, batch.cond.as_ref());
    check_same_shape(&mu, &batch.x0, "diffusion_loss model output")?;
    Ok(target.sub(&mu).sqr().mean_all())
}

/// Score `-(x_t + (1-t) mu) / t`. Fails for `t = 0` (score singularity).
pub fn score_from_velocity(x_t: &Tensor, mu_out: &Tensor, t: NoiseLevel) -> Result<Tensor> {
    check_same_shape(x_t, mu_out, "score_from_velocity")?;
    let tv = t.value();
    if tv == 0.0 {
        return Err(PoseError::ZeroNoiseLevel(
            "score_from_velocity requires t > 0".into(),
        ));
    }
    Ok(x_t
        .add(&mu_out.mul_scalar(1.0 - tv))
        .mul_scalar(-1.0 / tv))
}

/// Euler integration of `dx/dt = mu` from `t = 1` down to `t = 0` on a
/// uniform grid. Returns the sample and the number of function evaluations.
pub fn euler_sample(
    model: &dyn Velocity,
    x_noise: &Tensor,
    steps: usize,
    cond: Option<&Conditioning>,
) -> Result<(Tensor, usize)> {
    if steps == 0 {
        return Err(PoseError::InvalidArgument(
            "euler_sample requires steps >= 1".into(),
        ));
    }
    let dt = 1.0 / steps as f64;
    let mut x = x_noise.clone();
    for k in 0..steps {
        let t = 1.0 - k as f64 * dt;
        let mu = model.velocity(&x, &[t], cond);
        x = x.sub(&mu.mul_scalar(dt));
    }
    Ok((x, steps))
}

/// Single-step clean estimate `x_t - t mu(x_t, t)`. For `t = 0` the input is
/// already clean and is returned unchanged.
pub fn one_step_denoise(
    model: &dyn Velocity,
    x_t: &Tensor,
    t: NoiseLevel,
    cond: Option<&Conditioning>,
) -> Tensor {
    let tv = t.value();
    if tv == 0.0 {
        return x_t.clone();
    }
    let mu = model.velocity(x_t, &[tv], cond);
    x_t.sub(&mu.mul_scalar(tv))
}

/// Clean estimate from a precomputed velocity output.
pub fn denoise_from(x_t: &Tensor, mu_out: &Tensor, t: NoiseLevel) -> Tensor {
    x_t.sub(&mu_out.mul_scalar(t.value()))
}

/// Analytic optimal velocity for 1-D standard-normal data under independent
/// coupling: `mu*(x, t) = (2t - 1) x / ((1-t)^2 + t^2)`. Test oracle.
pub fn gaussian_optimal_velocity() -> impl Velocity {
    FnVelocity(|x: &Tensor, ts: &[f64]| {
        let tt = per_sample(ts, x);
        let v = tt
            .mul_scalar(-1.0)
            .add_scalar(1.0)
            .sqr()
            .add(&tt.sqr());
        x.mul(&tt.mul_scalar(2.0).add_scalar(-1.0)).div(&v)
    })
}
