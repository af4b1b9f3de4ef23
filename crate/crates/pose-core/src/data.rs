//! Synthetic conditional "video" data and analytic toy distributions.
//!
//! Moving-blob clips are the training corpus: a shape glides across a small
//! frame with toroidal wrap, conditioned on the first frame. Gaussian
//! mixtures supply analytic scores for oracle tests, and the structured
//! spatiotemporal perturbations here feed the discriminator regularizer.

use crate::flow::Conditioning;
use crate::rng::{self, PoseRng};
use crate::tensor::Tensor;
use crate::{PoseError, Result};
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Scene description used as the desk-scale stand-in for a text embedding.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneAttributes {
    pub shape_class: usize,
    /// unit 2-vector (dy, dx) in pixels per frame direction
    pub motion_direction: [f64; 2],
    /// pixels per frame, >= 0
    pub speed: f64,
    pub color: usize,
}

impl SceneAttributes {
    /// Fixed-length embedding: one-hot shape (4), direction, speed, one-hot
    /// color (2).
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = vec![0.0; 4];
        v[self.shape_class % 4] = 1.0;
        v.push(self.motion_direction[0]);
        v.push(self.motion_direction[1]);
        v.push(self.speed);
        let mut c = vec![0.0; 2];
        c[self.color % 2] = 1.0;
        v.extend(c);
        v
    }

    pub const DIM: usize = 9;
}

/// Configuration of the moving-blob generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlobConfig {
    pub n_clips: usize,
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub shape_classes: usize,
    pub n_directions: usize,
    pub min_speed: f64,
    pub max_speed: f64,
    pub blob_radius: f64,
}

impl Default for BlobConfig {
    fn default() -> Self {
        BlobConfig {
            n_clips: 256,
            frames: 8,
            channels: 1,
            height: 16,
            width: 16,
            shape_classes: 4,
            n_directions: 8,
            min_speed: 0.0,
            max_speed: 2.0,
            blob_radius: 2.5,
        }
    }
}

/// A batch of conditional clips sharing one frame mask.
#[derive(Clone)]
pub struct ClipBatch {
    /// (batch, frames, channels, height, width), values in [-1, 1]
    pub videos: Tensor,
    pub attributes: Vec<SceneAttributes>,
    /// per-frame mask, 1.0 = conditional frame
    pub mask: Vec<f64>,
}

impl ClipBatch {
    pub fn len(&self) -> usize {
        self.videos.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// First frame of every clip: (batch, channels, height, width).
    pub fn condition_frames(&self) -> Tensor {
        let s = self.videos.shape().to_vec();
        self.videos
            .narrow(1, 0, 1)
            .reshape(&[s[0], s[2], s[3], s[4]])
    }

    pub fn conditioning(&self) -> Conditioning {
        Conditioning {
            frame: self.condition_frames().detach(),
            mask: self.mask.clone(),
            attributes: self.attributes.iter().map(|a| a.to_vec()).collect(),
        }
    }

    /// Select clips by index into a new batch.
    pub fn select(&self, idx: &[usize]) -> ClipBatch {
        let rows: Vec<Tensor> = idx.iter().map(|&i| self.videos.narrow(0, i, 1)).collect();
        ClipBatch {
            videos: Tensor::concat(&rows, 0).detach(),
            attributes: idx.iter().map(|&i| self.attributes[i].clone()).collect(),
            mask: self.mask.clone(),
        }
    }

    pub fn sample(&self, rng: &mut PoseRng, n: usize) -> ClipBatch {
        use rand::Rng;
        let idx: Vec<usize> = (0..n).map(|_| rng.gen_range(0..self.len())).collect();
        self.select(&idx)
    }
}

fn blob_intensity(shape_class: usize, dy: f64, dx: f64, radius: f64) -> f64 {
    let r = radius;
    match shape_class % 4 {
        // soft disc
        0 => {
            let d = (dy * dy + dx * dx).sqrt();
            (1.0 - (d / r).powi(2)).max(0.0)
        }
        // square
        1 => {
            if dy.abs() <= r && dx.abs() <= r {
                1.0 - 0.5 * (dy.abs().max(dx.abs()) / r)
            } else {
                0.0
            }
        }
        // diamond
        2 => (1.0 - (dy.abs() + dx.abs()) / (1.5 * r)).max(0.0),
        // horizontal bar
        _ => {
            if dy.abs() <= 0.6 * r && dx.abs() <= 1.4 * r {
                1.0
            } else {
                0.0
            }
        }
    }
}

/// Render a batch of moving-blob clips. Fully deterministic given the seed.
///
/// Each clip places a shape at `p_f = p0 + f * speed * direction` with
/// toroidal wrap. The first frame is the conditional frame.
pub fn make_moving_blob(config: &BlobConfig, seed: u64) -> Result<ClipBatch> {
    use rand::Rng;
    if config.frames < 2 {
        return Err(PoseError::InvalidArgument("need at least 2 frames".into()));
    }
    if config.height < 8 || config.width < 8 {
        return Err(PoseError::InvalidArgument(
            "resolution must be at least 8x8".into(),
        ));
    }
    if 2.0 * config.blob_radius >= config.height.min(config.width) as f64 {
        return Err(PoseError::InvalidArgument(format!(
            "blob radius {} too large for {}x{} frame",
            config.blob_radius, config.height, config.width
        )));
    }
    let mut rng = rng::rng_from_seed(seed);
    let (b, f, c, h, w) = (
        config.n_clips,
        config.frames,
        config.channels,
        config.height,
        config.width,
    );
    let mut data = ArrayD::from_elem(IxDyn(&[b, f, c, h, w]), -1.0);
    let mut attrs = Vec::with_capacity(b);
    for bi in 0..b {
        let shape_class = rng.gen_range(0..config.shape_classes);
        let dir_idx = rng.gen_range(0..config.n_directions);
        let ang = 2.0 * std::f64::consts::PI * dir_idx as f64 / config.n_directions as f64;
        let dir = [ang.sin(), ang.cos()]; // (dy, dx)
        let speed = rng.gen_range(config.min_speed..=config.max_speed);
        let color = rng.gen_range(0..2usize);
        let amplitude = if color == 0 { 1.0 } else { 0.55 };
        let y0 = rng.gen_range(0.0..h as f64);
        let x0 = rng.gen_range(0.0..w as f64);
        for fi in 0..f {
            let cy = y0 + fi as f64 * speed * dir[0];
            let cx = x0 + fi as f64 * speed * dir[1];
            for yi in 0..h {
                for xi in 0..w {
                    // toroidal displacement to the blob center
                    let mut dy = (yi as f64 - cy).rem_euclid(h as f64);
                    if dy > h as f64 / 2.0 {
                        dy -= h as f64;
                    }
                    let mut dx = (xi as f64 - cx).rem_euclid(w as f64);
                    if dx > w as f64 / 2.0 {
                        dx -= w as f64;
                    }
                    let val = blob_intensity(shape_class, dy, dx, config.blob_radius);
                    if val > 0.0 {
                        for ci in 0..c {
                            data[[bi, fi, ci, yi, xi]] = -1.0 + 2.0 * amplitude * val;
                        }
                    }
                }
            }
        }
        attrs.push(SceneAttributes {
            shape_class,
            motion_direction: dir,
            speed,
            color,
        });
    }
    let mut mask = vec![0.0; f];
    mask[0] = 1.0;
    Ok(ClipBatch {
        videos: Tensor::new(data),
        attributes: attrs,
        mask,
    })
}

/// Intensity-weighted centroid of one frame (y, x); test helper for motion
/// checks. Weights are the rendered intensity above background.
pub fn frame_centroid(frame: &ndarray::ArrayViewD<f64>) -> (f64, f64) {
    // frame: (c, h, w). Circular (toroidal) mean per axis so blobs that
    // straddle the wrap boundary still report the true center.
    let shape = frame.shape();
    let (h, w) = (shape[1], shape[2]);
    let tau = std::f64::consts::TAU;
    let (mut cy, mut sy, mut cx, mut sx) = (0.0, 0.0, 0.0, 0.0);
    for yi in 0..h {
        for xi in 0..w {
            let v = (frame[[0, yi, xi]] + 1.0) / 2.0;
            let ay = tau * yi as f64 / h as f64;
            let ax = tau * xi as f64 / w as f64;
            cy += v * ay.cos();
            sy += v * ay.sin();
            cx += v * ax.cos();
            sx += v * ax.sin();
        }
    }
    let y = (sy.atan2(cy) / tau * h as f64).rem_euclid(h as f64);
    let x = (sx.atan2(cx) / tau * w as f64).rem_euclid(w as f64);
    (y, x)
}

// ---- Gaussian mixture toys ----

/// 1-D Gaussian mixture with analytic density and score; the oracle
/// substrate for distribution-matching checks.
#[derive(Debug, Clone)]
pub struct GaussianMixture {
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, means: Vec<f64>, stds: Vec<f64>) -> Result<Self> {
        if weights.len() != means.len() || weights.len() != stds.len() || weights.is_empty() {
            return Err(PoseError::InvalidArgument(
                "mixture component lists must be non-empty and equal length".into(),
            ));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || weights.iter().any(|&w| w < 0.0) {
            return Err(PoseError::InvalidArgument(format!(
                "mixture weights must be non-negative and sum to 1 (got {sum})"
            )));
        }
        if stds.iter().any(|&s| s <= 0.0) {
            return Err(PoseError::InvalidArgument(
                "mixture stds must be positive".into(),
            ));
        }
        Ok(GaussianMixture {
            weights,
            means,
            stds,
        })
    }

    pub fn standard() -> Self {
        GaussianMixture::new(vec![1.0], vec![0.0], vec![1.0]).unwrap()
    }

    /// i.i.d. samples, shape (n, dims).
    pub fn sample(&self, dims: usize, n: usize, seed: u64) -> ArrayD<f64> {
        use rand::Rng;
        let mut rng = rng::rng_from_seed(seed);
        let mut out = ArrayD::zeros(IxDyn(&[n, dims]));
        for i in 0..n {
            for d in 0..dims {
                let u: f64 = rng.gen_range(0.0..1.0);
                let mut acc = 0.0;
                let mut k = self.weights.len() - 1;
                for (j, &w) in self.weights.iter().enumerate() {
                    acc += w;
                    if u < acc {
                        k = j;
                        break;
                    }
                }
                let z = rng::randn(&mut rng, &[1])[0];
                out[[i, d]] = self.means[k] + self.stds[k] * z;
            }
        }
        out
    }

    pub fn density(&self, x: f64) -> f64 {
        let mut p = 0.0;
        for ((&w, &m), &s) in self.weights.iter().zip(&self.means).zip(&self.stds) {
            let z = (x - m) / s;
            p += w * (-0.5 * z * z).exp() / (s * (2.0 * std::f64::consts::PI).sqrt());
        }
        p
    }

    /// Analytic score d/dx log p(x).
    pub fn score(&self, x: f64) -> f64 {
        let mut num = 0.0;
        for ((&w, &m), &s) in self.weights.iter().zip(&self.means).zip(&self.stds) {
            let z = (x - m) / s;
            let comp = w * (-0.5 * z * z).exp() / (s * (2.0 * std::f64::consts::PI).sqrt());
            num += comp * (-(x - m) / (s * s));
        }
        num / self.density(x)
    }
}

// ---- structured spatiotemporal perturbations ----

/// Scales for the composite perturbation `x + eps_s + eps_t` plus noise-level
/// jitter; all scales must be >= 0.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub sigma_s: f64,
    pub sigma_t: f64,
    pub t_jitter: f64,
}

impl PerturbationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.sigma_s < 0.0 || self.sigma_t < 0.0 || self.t_jitter < 0.0 {
            return Err(PoseError::InvalidArgument(
                "perturbation scales must be >= 0".into(),
            ));
        }
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        self.sigma_s == 0.0 && self.sigma_t == 0.0
    }
}

impl Default for PerturbationSpec {
    fn default() -> Self {
        PerturbationSpec {
            sigma_s: 0.01,
            sigma_t: 0.01,
            t_jitter: 0.01,
        }
    }
}

pub struct Perturbed {
    pub x_pert: Tensor,
    pub t_pert: Vec<f64>,
    pub eps_s: Tensor,
    pub eps_t: Tensor,
}

/// Composite perturbation: i.i.d. per-pixel spatial noise plus a per-frame
/// constant offset drawn as a temporally smoothed Gaussian walk, plus jitter
/// on the noise level. `x_pert - x == eps_s + eps_t` exactly.
pub fn perturb_spatiotemporal(
    x: &Tensor,
    spec: &PerturbationSpec,
    ts: &[f64],
    seed: u64,
) -> Result<Perturbed> {
    spec.validate()?;
    let shape = x.shape().to_vec();
    if shape.len() != 5 {
        return Err(PoseError::ShapeMismatch(format!(
            "expected (b, f, c, h, w), got {shape:?}"
        )));
    }
    let (b, f) = (shape[0], shape[1]);
    let mut rng = rng::rng_from_seed(seed);
    let eps_s = if spec.sigma_s > 0.0 {
        let mut e = rng::randn(&mut rng, &shape);
        e.mapv_inplace(|v| v * spec.sigma_s);
        e
    } else {
        ArrayD::zeros(IxDyn(&shape))
    };
    // frame-wise constant offsets: Gaussian walk smoothed with a length-3
    // moving average, so the motion trajectory wobbles without new texture
    let mut eps_t = ArrayD::zeros(IxDyn(&shape));
    if spec.sigma_t > 0.0 {
        for bi in 0..b {
            let steps = rng::randn(&mut rng, &[f]);
            let mut walk = vec![0.0f64; f];
            let mut acc = 0.0;
            for (fi, wv) in walk.iter_mut().enumerate() {
                acc += steps[fi];
                *wv = acc;
            }
            let smoothed: Vec<f64> = (0..f)
                .map(|fi| {
                    let lo = fi.saturating_sub(1);
                    let hi = (fi + 1).min(f - 1);
                    let mut s = 0.0;
                    for w in &walk[lo..=hi] {
                        s += w;
                    }
                    s / (hi - lo + 1) as f64
                })
                .collect();
            for fi in 0..f {
                let v = spec.sigma_t * smoothed[fi];
                eps_t
                    .index_axis_mut(ndarray::Axis(0), bi)
                    .index_axis_mut(ndarray::Axis(0), fi)
                    .fill(v);
            }
        }
    }
    let t_pert: Vec<f64> = ts
        .iter()
        .map(|&t| {
            let j = if spec.t_jitter > 0.0 {
                rng::randn(&mut rng, &[1])[0] * spec.t_jitter
            } else {
                0.0
            };
            (t + j).clamp(1e-6, 1.0)
        })
        .collect();
    let eps_s = Tensor::new(eps_s);
    let eps_t = Tensor::new(eps_t);
    // single combined add so x + (eps_s + eps_t) reconstructs x_pert bit for bit
    let x_pert = x.add(&eps_s.add(&eps_t));
    Ok(Perturbed {
        x_pert,
        t_pert,
        eps_s,
        eps_t,
    })
}

// ---- persistence ----

#[derive(Debug, Serialize, Deserialize)]
struct ClipManifest {
    shape: Vec<usize>,
    dtype: String,
    seed: u64,
    mask: Vec<f64>,
    attributes: Vec<SceneAttributes>,
    config: BlobConfig,
}

/// Persist clips as a tensor container plus JSON manifest in `dir`.
pub fn save_clips(dir: &Path, batch: &ClipBatch, config: &BlobConfig, seed: u64) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut tensors = std::collections::BTreeMap::new();
    tensors.insert("videos".to_string(), batch.videos.data().clone());
    crate::ckpt::write_tensors(&dir.join("clips.bin"), &tensors)?;
    let manifest = ClipManifest {
        shape: batch.videos.shape().to_vec(),
        dtype: "f64".into(),
        seed,
        mask: batch.mask.clone(),
        attributes: batch.attributes.clone(),
        config: config.clone(),
    };
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

pub fn load_clips(dir: &Path) -> Result<ClipBatch> {
    let manifest: ClipManifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    let tensors = crate::ckpt::read_tensors(&dir.join("clips.bin"))?;
    let videos = tensors
        .get("videos")
        .ok_or_else(|| PoseError::Missing("videos tensor".into()))?
        .clone();
    Ok(ClipBatch {
        videos: Tensor::new(videos),
        attributes: manifest.attributes,
        mask: manifest.mask,
    })
}
