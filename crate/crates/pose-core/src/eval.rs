//! Desk-scale evaluation: distribution-distance proxies (sliced Wasserstein,
//! RBF MMD), temporal-quality proxies, condition fidelity, NFE/latency
//! accounting, and a fixed composite score for ranking methods.

use crate::data::ClipBatch;
use crate::flow::{euler_sample, Conditioning, Velocity};
use crate::rng::{rng_from_seed, randn};
use crate::tensor::Tensor;
use crate::{PoseError, Result};
use ndarray::{ArrayD, Axis, IxDyn};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub sliced_wasserstein: f64,
    pub mmd_rbf: f64,
    /// mean squared second temporal difference, lower is better
    pub motion_smoothness: f64,
    /// mean adjacent-frame correlation
    pub subject_consistency: f64,
    /// generated frame 0 vs. the condition frame
    pub condition_mse: f64,
    /// mean adjacent-frame difference energy
    pub dynamic_degree: f64,
    pub nfe: usize,
    pub wall_time_s: f64,
    pub composite: f64,
}

// ---- sliced Wasserstein ----

/// Exact 1-D Wasserstein-1 between empirical distributions (possibly of
/// different sizes), via the merged quantile-function breakpoints.
pub fn wasserstein1_1d(a: &[f64], b: &[f64]) -> f64 {
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(|x, y| x.partial_cmp(y).unwrap());
    sb.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let (na, nb) = (sa.len() as f64, sb.len() as f64);
    // merge the quantile breakpoints i/na and j/nb
    let mut qs: Vec<f64> = (1..sa.len()).map(|i| i as f64 / na).collect();
    qs.extend((1..sb.len()).map(|j| j as f64 / nb));
    qs.push(1.0);
    qs.sort_by(|x, y| x.partial_cmp(y).unwrap());
    qs.dedup();
    let mut total = 0.0;
    let mut prev = 0.0;
    for &q in &qs {
        // quantile functions are constant on (prev, q]
        let mid = 0.5 * (prev + q);
        let ia = ((mid * na).floor() as usize).min(sa.len() - 1);
        let ib = ((mid * nb).floor() as usize).min(sb.len() - 1);
        total += (q - prev) * (sa[ia] - sb[ib]).abs();
        prev = q;
    }
    total
}

/// Sliced Wasserstein distance between two point sets of shape (n, d): the
/// mean 1-D W1 over seeded random unit projections.
pub fn sliced_wasserstein(
    a: &ArrayD<f64>,
    b: &ArrayD<f64>,
    n_projections: usize,
    seed: u64,
) -> Result<f64> {
    if a.ndim() != 2 || b.ndim() != 2 {
        return Err(PoseError::ShapeMismatch(
            "sliced_wasserstein expects (n, d) point sets".into(),
        ));
    }
    let d = a.shape()[1];
    if b.shape()[1] != d {
        return Err(PoseError::ShapeMismatch(format!(
            "dimension mismatch: {} vs {}",
            d,
            b.shape()[1]
        )));
    }
    if a.shape()[0] < 2 || b.shape()[0] < 2 {
        return Err(PoseError::InvalidArgument(
            "need at least 2 points per set".into(),
        ));
    }
    if d == 1 {
        return Ok(wasserstein1_1d(
            a.as_slice().unwrap(),
            b.as_slice().unwrap(),
        ));
    }
    let mut rng = rng_from_seed(seed);
    let mut total = 0.0;
    for _ in 0..n_projections.max(1) {
        let mut u = randn(&mut rng, &[d]);
        let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        u.mapv_inplace(|v| v / norm);
        let project = |set: &ArrayD<f64>| -> Vec<f64> {
            set.axis_iter(Axis(0))
                .map(|row| row.iter().zip(u.iter()).map(|(x, w)| x * w).sum())
                .collect()
        };
        total += wasserstein1_1d(&project(a), &project(b));
    }
    Ok(total / n_projections.max(1) as f64)
}

// ---- MMD ----

fn sq_dist(x: ndarray::ArrayViewD<f64>, y: ndarray::ArrayViewD<f64>) -> f64 {
    x.iter().zip(y.iter()).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Median-heuristic bandwidth: median pairwise squared distance on the
/// pooled sample.
fn median_bandwidth(a: &ArrayD<f64>, b: &ArrayD<f64>) -> f64 {
    let rows: Vec<_> = a
        .axis_iter(Axis(0))
        .chain(b.axis_iter(Axis(0)))
        .collect();
    let mut d2 = Vec::new();
    // cap the pair count so the heuristic stays cheap on large sets
    let stride = (rows.len() * rows.len() / 4096).max(1);
    let mut k = 0usize;
    for i in 0..rows.len() {
        for j in (i + 1)..rows.len() {
            if k % stride == 0 {
                d2.push(sq_dist(rows[i].view(), rows[j].view()));
            }
            k += 1;
        }
    }
    d2.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let med = d2[d2.len() / 2];
    if med > 0.0 {
        med
    } else {
        1.0
    }
}

/// RBF-kernel maximum mean discrepancy (squared). The biased estimator is
/// always >= 0; the unbiased one can dip slightly negative.
pub fn mmd_rbf(a: &ArrayD<f64>, b: &ArrayD<f64>, biased: bool) -> Result<f64> {
    if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[1] {
        return Err(PoseError::ShapeMismatch(
            "mmd_rbf expects (n, d) point sets of equal dimension".into(),
        ));
    }
    let (n, m) = (a.shape()[0], b.shape()[0]);
    if n < 2 || m < 2 {
        return Err(PoseError::InvalidArgument(
            "need at least 2 points per set".into(),
        ));
    }
    let gamma = 1.0 / median_bandwidth(a, b);
    let kern = |x: ndarray::ArrayViewD<f64>, y: ndarray::ArrayViewD<f64>| {
        (-gamma * sq_dist(x, y)).exp()
    };
    let ra: Vec<_> = a.axis_iter(Axis(0)).collect();
    let rb: Vec<_> = b.axis_iter(Axis(0)).collect();
    let mut kaa = 0.0;
    let mut kbb = 0.0;
    let mut kab = 0.0;
    for i in 0..n {
        for j in 0..n {
            if biased || i != j {
                kaa += kern(ra[i].view(), ra[j].view());
            }
        }
    }
    for i in 0..m {
        for j in 0..m {
            if biased || i != j {
                kbb += kern(rb[i].view(), rb[j].view());
            }
        }
    }
    for i in 0..n {
        for j in 0..m {
            kab += kern(ra[i].view(), rb[j].view());
        }
    }
    let (nf, mf) = (n as f64, m as f64);
    Ok(if biased {
        kaa / (nf * nf) + kbb / (mf * mf) - 2.0 * kab / (nf * mf)
    } else {
        kaa / (nf * (nf - 1.0)) + kbb / (mf * (mf - 1.0)) - 2.0 * kab / (nf * mf)
    })
}

// ---- temporal metrics ----

/// (motion_smoothness, subject_consistency, dynamic_degree) over a clip
/// batch of shape (b, f, c, h, w); all per-element means.
pub fn temporal_metrics(videos: &Tensor) -> Result<(f64, f64, f64)> {
    let s = videos.shape().to_vec();
    if s.len() != 5 {
        return Err(PoseError::ShapeMismatch(format!(
            "expected (b, f, c, h, w), got {s:?}"
        )));
    }
    let (b, f) = (s[0], s[1]);
    if f < 3 {
        return Err(PoseError::InvalidArgument(
            "temporal metrics need at least 3 frames".into(),
        ));
    }
    let v = videos.data();
    let frame = |bi: usize, fi: usize| v.index_axis(Axis(0), bi).index_axis(Axis(0), fi).to_owned();
    let mut smooth = 0.0;
    let mut dynamic = 0.0;
    let mut consist = 0.0;
    for bi in 0..b {
        for fi in 1..(f - 1) {
            let d2 = &frame(bi, fi + 1) - &frame(bi, fi).mapv(|x| 2.0 * x) + &frame(bi, fi - 1);
            smooth += d2.mapv(|x| x * x).mean().unwrap();
        }
        for fi in 0..(f - 1) {
            let d1 = &frame(bi, fi + 1) - &frame(bi, fi);
            dynamic += d1.mapv(|x| x * x).mean().unwrap();
            consist += pearson(&frame(bi, fi), &frame(bi, fi + 1));
        }
    }
    Ok((
        smooth / (b * (f - 2)) as f64,
        consist / (b * (f - 1)) as f64,
        dynamic / (b * (f - 1)) as f64,
    ))
}

fn pearson(a: &ArrayD<f64>, b: &ArrayD<f64>) -> f64 {
    let n = a.len() as f64;
    let ma = a.sum() / n;
    let mb = b.sum() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va * vb < 1e-24 {
        // degenerate frames: identical constants count as perfectly
        // consistent, anything else as uncorrelated
        let mse: f64 = a
            .iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        return if mse < 1e-24 { 1.0 } else { 0.0 };
    }
    cov / (va.sqrt() * vb.sqrt())
}

/// Mean squared error between generated first frames and the condition
/// frames (b, c, h, w).
pub fn condition_fidelity(videos: &Tensor, conditions: &Tensor) -> Result<f64> {
    let vs = videos.shape().to_vec();
    let cs = conditions.shape().to_vec();
    if vs.len() != 5 || cs.len() != 4 || vs[0] != cs[0] || vs[2..] != cs[1..] {
        return Err(PoseError::ShapeMismatch(format!(
            "videos {vs:?} vs conditions {cs:?}"
        )));
    }
    let v = videos.data();
    let c = conditions.data();
    let mut total = 0.0;
    for bi in 0..vs[0] {
        let f0 = v.index_axis(Axis(0), bi);
        let f0 = f0.index_axis(Axis(0), 0);
        let cf = c.index_axis(Axis(0), bi);
        total += f0
            .iter()
            .zip(cf.iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / cf.len() as f64;
    }
    Ok(total / vs[0] as f64)
}

// ---- NFE / latency ----

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LatencyRow {
    pub steps: usize,
    pub nfe: usize,
    pub wall_time_s: f64,
}

/// Time `euler_sample` on a fixed batch at each step count. For distilled
/// models NFE equals the step count; the guided-teacher convention doubles
/// it (two evaluations per step).
pub fn latency_report(
    model: &dyn Velocity,
    noise: &Tensor,
    steps: &[usize],
    guided: bool,
    cond: Option<&Conditioning>,
) -> Result<Vec<LatencyRow>> {
    let mut rows = Vec::new();
    for &s in steps {
        let start = std::time::Instant::now();
        let (_, nfe) = euler_sample(model, noise, s, cond)?;
        let wall = start.elapsed().as_secs_f64();
        rows.push(LatencyRow {
            steps: s,
            nfe: if guided { 2 * nfe } else { nfe },
            wall_time_s: wall,
        });
    }
    Ok(rows)
}

// ---- composite score ----

/// Per-dataset normalizers, frozen from the teacher's 40-step run so all
/// methods in a comparison share the same scale.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Normalizers {
    pub sw: f64,
    pub smoothness: f64,
    pub condition: f64,
}

impl Normalizers {
    pub fn unit() -> Self {
        Normalizers {
            sw: 1.0,
            smoothness: 1.0,
            condition: 1.0,
        }
    }

    pub fn from_report(r: &EvalReport) -> Self {
        Normalizers {
            sw: r.sliced_wasserstein.max(1e-12),
            smoothness: r.motion_smoothness.max(1e-12),
            condition: r.condition_mse.max(1e-12),
        }
    }
}

/// Fixed monotone aggregation, higher is better:
/// `0.4 (1 - sw/sw_n) + 0.2 consistency + 0.2 (1 - smooth/smooth_n)
///  + 0.2 (1 - cond/cond_n)`.
pub fn composite_score(report: &EvalReport, norms: &Normalizers) -> f64 {
    0.4 * (1.0 - report.sliced_wasserstein / norms.sw)
        + 0.2 * report.subject_consistency
        + 0.2 * (1.0 - report.motion_smoothness / norms.smoothness)
        + 0.2 * (1.0 - report.condition_mse / norms.condition)
}

// ---- model-level evaluation ----

fn flatten_clips(videos: &Tensor) -> ArrayD<f64> {
    let s = videos.shape();
    let b = s[0];
    let rest: usize = s[1..].iter().product();
    videos
        .data()
        .clone()
        .into_shape_with_order(IxDyn(&[b, rest]))
        .unwrap()
}

/// Sample the model once per reference clip and score the samples against
/// the reference set.
pub fn evaluate_model(
    model: &dyn Velocity,
    reference: &ClipBatch,
    steps: usize,
    guided: bool,
    n_projections: usize,
    seed: u64,
    norms: &Normalizers,
) -> Result<EvalReport> {
    let cond = reference.conditioning();
    let shape = reference.videos.shape().to_vec();
    let mut rng = rng_from_seed(seed);
    let noise = Tensor::new(randn(&mut rng, &shape));
    let start = std::time::Instant::now();
    let (samples, nfe) = euler_sample(model, &noise, steps, Some(&cond))?;
    let wall = start.elapsed().as_secs_f64();
    let samples = samples.detach();
    let flat_gen = flatten_clips(&samples);
    let flat_ref = flatten_clips(&reference.videos);
    let sw = sliced_wasserstein(&flat_gen, &flat_ref, n_projections, seed)?;
    let mmd = mmd_rbf(&flat_gen, &flat_ref, true)?;
    let (smooth, consist, dynamic) = temporal_metrics(&samples)?;
    let cond_mse = condition_fidelity(&samples, &reference.condition_frames())?;
    let mut report = EvalReport {
        sliced_wasserstein: sw,
        mmd_rbf: mmd,
        motion_smoothness: smooth,
        subject_consistency: consist,
        condition_mse: cond_mse,
        dynamic_degree: dynamic,
        nfe: if guided { 2 * nfe } else { nfe },
        wall_time_s: wall,
        composite: 0.0,
    };
    report.composite = composite_score(&report, norms);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_moving_blob, BlobConfig};
    use rand::Rng;

    #[test]
    fn w1_basics() {
        assert_eq!(wasserstein1_1d(&[0.0, 1.0], &[0.0, 1.0]), 0.0);
        // point masses at 0 and d
        assert!((wasserstein1_1d(&[0.0, 0.0], &[3.0, 3.0]) - 3.0).abs() < 1e-12);
        // unequal sizes: quantile integral gives 0.5
        assert!((wasserstein1_1d(&[0.0, 1.0], &[0.5]) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn sw_identical_and_errors() {
        let mut rng = rng_from_seed(61);
        let a = randn(&mut rng, &[50, 3]);
        assert_eq!(sliced_wasserstein(&a, &a, 16, 1).unwrap(), 0.0);
        let b = randn(&mut rng, &[50, 4]);
        assert!(sliced_wasserstein(&a, &b, 16, 1).is_err());
        let tiny = randn(&mut rng, &[1, 3]);
        assert!(sliced_wasserstein(&a, &tiny, 16, 1).is_err());
    }

    #[test]
    fn sw_shifted_gaussians_matches_mean_shift() {
        let n = 10_000;
        let mut rng = rng_from_seed(62);
        let a = randn(&mut rng, &[n, 1]);
        for &m in &[1.0, 2.5] {
            let b = randn(&mut rng, &[n, 1]).mapv(|v| v + m);
            let sw = sliced_wasserstein(&a, &b, 1, 3).unwrap();
            assert!(
                (sw - m).abs() / m < 0.05,
                "m={m}: sw {sw}"
            );
        }
    }

    #[test]
    fn sw_symmetric_and_triangle() {
        let mut rng = rng_from_seed(63);
        for trial in 0..5 {
            let a = randn(&mut rng, &[30, 4]);
            let b = randn(&mut rng, &[30, 4]).mapv(|v| v * 1.5 + 0.3);
            let c = randn(&mut rng, &[30, 4]).mapv(|v| v - 1.0);
            let seed = 100 + trial;
            let ab = sliced_wasserstein(&a, &b, 32, seed).unwrap();
            let ba = sliced_wasserstein(&b, &a, 32, seed).unwrap();
            assert!((ab - ba).abs() < 1e-12);
            let ac = sliced_wasserstein(&a, &c, 32, seed).unwrap();
            let cb = sliced_wasserstein(&c, &b, 32, seed).unwrap();
            // with shared projections each 1-D W1 is a metric, so the mean is
            assert!(ab <= ac + cb + 1e-12, "{ab} > {ac} + {cb}");
        }
    }

    #[test]
    fn mmd_estimators() {
        let mut rng = rng_from_seed(64);
        let a = randn(&mut rng, &[40, 3]);
        // biased estimator on identical sets is exactly 0
        assert!(mmd_rbf(&a, &a, true).unwrap().abs() < 1e-12);
        // unbiased on identical sets is small
        assert!(mmd_rbf(&a, &a, false).unwrap().abs() < 0.1);
        // biased is nonnegative and detects a clear shift
        let b = randn(&mut rng, &[40, 3]).mapv(|v| v + 3.0);
        let shifted = mmd_rbf(&a, &b, true).unwrap();
        let same = mmd_rbf(&a, &randn(&mut rng, &[40, 3]), true).unwrap();
        assert!(same >= 0.0 && shifted > same);
    }

    #[test]
    fn temporal_metric_cases() {
        // static video
        let v = Tensor::new(ArrayD::from_elem(IxDyn(&[1, 4, 1, 3, 3]), 0.7));
        let (s, c, d) = temporal_metrics(&v).unwrap();
        assert_eq!(s, 0.0);
        assert_eq!(c, 1.0);
        assert_eq!(d, 0.0);
        // linear ramp x_f = f * u
        let mut ramp = ArrayD::zeros(IxDyn(&[1, 4, 1, 2, 2]));
        for fi in 0..4 {
            ramp.index_axis_mut(Axis(1), fi).fill(fi as f64 * 0.5);
        }
        let (s, _, d) = temporal_metrics(&Tensor::new(ramp)).unwrap();
        assert!(s.abs() < 1e-15);
        assert!((d - 0.25).abs() < 1e-12);
        // too few frames
        let short = Tensor::new(ArrayD::zeros(IxDyn(&[1, 2, 1, 2, 2])));
        assert!(temporal_metrics(&short).is_err());
    }

    #[test]
    fn temporal_metrics_match_brute_force() {
        let mut rng = rng_from_seed(65);
        let v = Tensor::new(randn(&mut rng, &[3, 5, 2, 4, 4]));
        let (s, c, d) = temporal_metrics(&v).unwrap();
        // independent brute-force loops over raw indices
        let a = v.data();
        let (b, f, ch, h, w) = (3, 5, 2, 4, 4);
        let mut s2 = 0.0;
        let mut d2 = 0.0;
        let mut c2 = 0.0;
        for bi in 0..b {
            for fi in 1..f - 1 {
                let mut acc = 0.0;
                for ci in 0..ch {
                    for yi in 0..h {
                        for xi in 0..w {
                            let val = a[[bi, fi + 1, ci, yi, xi]] - 2.0 * a[[bi, fi, ci, yi, xi]]
                                + a[[bi, fi - 1, ci, yi, xi]];
                            acc += val * val;
                        }
                    }
                }
                s2 += acc / (ch * h * w) as f64;
            }
            for fi in 0..f - 1 {
                let mut acc = 0.0;
                let mut xs = Vec::new();
                let mut ys = Vec::new();
                for ci in 0..ch {
                    for yi in 0..h {
                        for xi in 0..w {
                            let x = a[[bi, fi, ci, yi, xi]];
                            let y = a[[bi, fi + 1, ci, yi, xi]];
                            acc += (y - x) * (y - x);
                            xs.push(x);
                            ys.push(y);
                        }
                    }
                }
                d2 += acc / (ch * h * w) as f64;
                let n = xs.len() as f64;
                let mx = xs.iter().sum::<f64>() / n;
                let my = ys.iter().sum::<f64>() / n;
                let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
                let vx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
                let vy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
                c2 += cov / (vx.sqrt() * vy.sqrt());
            }
        }
        s2 /= (b * (f - 2)) as f64;
        d2 /= (b * (f - 1)) as f64;
        c2 /= (b * (f - 1)) as f64;
        assert!((s - s2).abs() < 1e-10, "{s} vs {s2}");
        assert!((d - d2).abs() < 1e-10, "{d} vs {d2}");
        assert!((c - c2).abs() < 1e-10, "{c} vs {c2}");
        assert!((-1.0..=1.0).contains(&c));
    }

    #[test]
    fn condition_fidelity_cases() {
        let batch = make_moving_blob(
            &BlobConfig {
                n_clips: 3,
                frames: 4,
                height: 8,
                width: 8,
                blob_radius: 1.5,
                ..Default::default()
            },
            1,
        )
        .unwrap();
        let cond = batch.condition_frames();
        assert_eq!(condition_fidelity(&batch.videos, &cond).unwrap(), 0.0);
        let shifted = batch.videos.add_scalar(0.3);
        let mse = condition_fidelity(&shifted, &cond).unwrap();
        assert!((mse - 0.09).abs() < 1e-12);
        // misaligned batch
        let wrong = cond.narrow(0, 0, 2);
        assert!(condition_fidelity(&batch.videos, &wrong).is_err());
    }

    #[test]
    fn latency_nfe_accounting() {
        let model = crate::flow::FnVelocity(|x: &Tensor, _ts: &[f64]| x.mul_scalar(0.1));
        let mut rng = rng_from_seed(66);
        let noise = Tensor::new(randn(&mut rng, &[2, 8]));
        let rows = latency_report(&model, &noise, &[1, 40], false, None).unwrap();
        assert_eq!(rows[0].nfe, 1);
        assert_eq!(rows[1].nfe, 40);
        let guided = latency_report(&model, &noise, &[50], true, None).unwrap();
        assert_eq!(guided[0].nfe, 100);
        assert!(latency_report(&model, &noise, &[0], false, None).is_err());
    }

    #[test]
    fn composite_monotone_in_each_component() {
        let mut rng = rng_from_seed(67);
        let norms = Normalizers {
            sw: 2.0,
            smoothness: 0.5,
            condition: 0.3,
        };
        for _ in 0..50 {
            let base = EvalReport {
                sliced_wasserstein: rng.gen_range(0.1..3.0),
                mmd_rbf: rng.gen_range(0.0..1.0),
                motion_smoothness: rng.gen_range(0.01..1.0),
                subject_consistency: rng.gen_range(-1.0..1.0),
                condition_mse: rng.gen_range(0.01..1.0),
                dynamic_degree: rng.gen_range(0.0..1.0),
                nfe: 1,
                wall_time_s: 0.0,
                composite: 0.0,
            };
            let s0 = composite_score(&base, &norms);
            // identical reports score identically
            assert_eq!(s0, composite_score(&base.clone(), &norms));
            // improve each component in its favorable direction
            let mut better = base.clone();
            better.sliced_wasserstein *= 0.9;
            assert!(composite_score(&better, &norms) > s0);
            let mut better = base.clone();
            better.motion_smoothness *= 0.9;
            assert!(composite_score(&better, &norms) > s0);
            let mut better = base.clone();
            better.condition_mse *= 0.9;
            assert!(composite_score(&better, &norms) > s0);
            let mut better = base.clone();
            better.subject_consistency += 0.05;
            assert!(composite_score(&better, &norms) > s0);
            // strict domination
            let mut dom = base.clone();
            dom.sliced_wasserstein *= 0.9;
            dom.motion_smoothness *= 0.9;
            dom.condition_mse *= 0.9;
            dom.subject_consistency = (dom.subject_consistency + 0.05).min(1.0);
            assert!(composite_score(&dom, &norms) > s0);
        }
    }

    #[test]
    fn evaluate_model_produces_complete_report() {
        let data = make_moving_blob(
            &BlobConfig {
                n_clips: 6,
                frames: 4,
                height: 8,
                width: 8,
                blob_radius: 1.5,
                ..Default::default()
            },
            2,
        )
        .unwrap();
        let model = crate::flow::FnVelocity(|x: &Tensor, _ts: &[f64]| x.mul_scalar(0.5));
        let r = evaluate_model(&model, &data, 4, false, 8, 9, &Normalizers::unit()).unwrap();
        assert_eq!(r.nfe, 4);
        assert!(r.sliced_wasserstein >= 0.0);
        assert!(r.mmd_rbf >= 0.0);
        assert!((-1.0..=1.0).contains(&r.subject_consistency));
        assert!(r.composite.is_finite());
    }
}
