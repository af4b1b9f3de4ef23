//! Phase I stability priming: distribution-matching updates of the one-step
//! generator against a frozen real model, with a dynamically tracked fake
//! model realized as frozen teacher weights plus trainable low-rank adapters.

use crate::ckpt::{param_checksum, Checkpoint, CkptMeta};
use crate::data::ClipBatch;
use crate::flow::{
    interpolate, score_from_velocity, Conditioning, FlowBatch, NoiseLevel, Velocity,
};
use crate::nets::{lora_init, merge_lora, BoundNet, LoraConfig, NetConfig, ParamMap};
use crate::optim::{Adam, AdamConfig};
use crate::rng::{derive_seed, randn, rng_from_seed, PoseRng};
use crate::tensor::Tensor;
use crate::{PoseError, Result};
use ndarray::Axis;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Phase1Config {
    pub steps: u64,
    pub batch_size: usize,
    pub lr_generator: f64,
    pub lr_fake: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// fake-model updates per generator update (the 1:K ratio)
    pub fake_updates: usize,
    pub t_lo: f64,
    pub t_hi: f64,
    /// linear anneal of the upper perturbation level from 0.6 to `t_hi`
    pub curriculum: bool,
    pub curriculum_steps: u64,
    pub normalize_grad: bool,
    pub dmd_weight: f64,
    pub lora: LoraConfig,
}

impl Default for Phase1Config {
    fn default() -> Self {
        Phase1Config {
            steps: 500,
            batch_size: 32,
            lr_generator: 1e-6,
            lr_fake: 1e-6,
            beta1: 0.9,
            beta2: 0.999,
            fake_updates: 5,
            t_lo: 0.02,
            t_hi: 0.98,
            curriculum: true,
            curriculum_steps: 250,
            normalize_grad: true,
            dmd_weight: 1.0,
            lora: LoraConfig::default(),
        }
    }
}

/// Distribution-matching gradient with respect to the generated clean
/// samples: `g = -(s_real - s_fake)` evaluated at a shared perturbation of
/// `x0_gen`. The result is detached; apply it through [`dmd_surrogate`].
pub fn dmd_gradient(
    x0_gen: &Tensor,
    mu_real: &dyn Velocity,
    mu_fake: &dyn Velocity,
    t: f64,
    eps: &Tensor,
    cond: Option<&Conditioning>,
    normalize: bool,
) -> Result<Tensor> {
    let t = NoiseLevel::new(t)?;
    if t.value() == 0.0 {
        return Err(PoseError::ZeroNoiseLevel(
            "dmd_gradient requires t > 0".into(),
        ));
    }
    let x0 = x0_gen.detach();
    let x_t = interpolate(&x0, eps, t)?;
    let s_real = score_from_velocity(&x_t, &mu_real.velocity(&x_t, &[t.value()], cond), t)?;
    let s_fake = score_from_velocity(&x_t, &mu_fake.velocity(&x_t, &[t.value()], cond), t)?;
    let mut g = s_fake.sub(&s_real).data().clone();
    if normalize {
        // per-sample scale: g_i / (mean |g_i| + 1e-8)
        let b = g.shape()[0];
        for i in 0..b {
            let mut row = g.index_axis_mut(Axis(0), i);
            let denom = row.iter().map(|v| v.abs()).sum::<f64>() / row.len() as f64 + 1e-8;
            row.mapv_inplace(|v| v / denom);
        }
    }
    Ok(Tensor::new(g))
}

/// Surrogate objective whose generator gradient matches the
/// distribution-matching update: `<detach(g), x0_gen> / B`.
pub fn dmd_surrogate(g: &Tensor, x0_gen: &Tensor) -> Tensor {
    let b = x0_gen.shape()[0] as f64;
    g.detach().mul(x0_gen).sum_all().mul_scalar(1.0 / b)
}

/// Diffusion loss of the fake model on detached generator outputs; gradients
/// reach only the adapter parameters.
pub fn fake_model_loss(
    mu_fake: &dyn Velocity,
    x0_gen_detached: &Tensor,
    eps: &Tensor,
    t: f64,
    cond: Option<&Conditioning>,
) -> Result<Tensor> {
    let b = x0_gen_detached.shape()[0];
    let batch = FlowBatch {
        x0: x0_gen_detached.detach(),
        eps: eps.clone(),
        ts: vec![t; b],
        cond: cond.cloned(),
    };
    crate::flow::diffusion_loss(mu_fake, &batch)
}

pub struct PrimingState {
    pub cfg: Phase1Config,
    pub net_cfg: NetConfig,
    pub generator: ParamMap,
    pub teacher: ParamMap,
    pub adapters: ParamMap,
    pub opt_generator: Adam,
    pub opt_fake: Adam,
    pub step: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PrimingMetrics {
    pub step: u64,
    pub dmd_loss: f64,
    pub fake_loss: f64,
    pub grad_norm: f64,
}

impl PrimingState {
    pub fn new(cfg: Phase1Config, net_cfg: NetConfig, teacher: ParamMap, seed: u64) -> Result<Self> {
        let mut rng = rng_from_seed(derive_seed(seed, "phase1/lora"));
        let adapters = lora_init(&net_cfg, &teacher, &cfg.lora, &mut rng)?;
        let opt_generator = Adam::new(AdamConfig::new(cfg.lr_generator, cfg.beta1, cfg.beta2));
        let opt_fake = Adam::new(AdamConfig::new(cfg.lr_fake, cfg.beta1, cfg.beta2));
        Ok(PrimingState {
            cfg,
            net_cfg,
            generator: teacher.clone(),
            teacher,
            adapters,
            opt_generator,
            opt_fake,
            step: 0,
        })
    }

    fn current_t_hi(&self) -> f64 {
        if self.cfg.curriculum && self.step < self.cfg.curriculum_steps {
            let frac = self.step as f64 / self.cfg.curriculum_steps as f64;
            0.6 + (self.cfg.t_hi - 0.6) * frac
        } else {
            self.cfg.t_hi
        }
    }
}

fn l2_norm(grads: &std::collections::BTreeMap<String, ndarray::ArrayD<f64>>) -> f64 {
    grads
        .values()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// One alternating update: a generator step driven by the
/// distribution-matching gradient at the single-step sampling point, then K
/// fake-model adapter steps on the fresh generator outputs.
pub fn priming_step(state: &mut PrimingState, batch: &ClipBatch, rng: &mut PoseRng) -> Result<PrimingMetrics> {
    use rand::Rng;
    let cond = batch.conditioning();
    let shape = batch.videos.shape().to_vec();

    // (1) single-step generation from pure noise (sampling point t = 1)
    let gen_ws = state.generator.bind(true);
    let gen_net = BoundNet::new(state.net_cfg.clone(), gen_ws.clone());
    let noise = Tensor::new(randn(rng, &shape));
    let x0_gen = crate::flow::one_step_denoise(&gen_net, &noise, NoiseLevel::ENDPOINT, Some(&cond));

    // (2) distribution-matching generator update
    let t_hi = state.current_t_hi();
    let t: f64 = rng.gen_range(state.cfg.t_lo..t_hi);
    let eps = Tensor::new(randn(rng, &shape));
    let teacher_net = BoundNet::new(state.net_cfg.clone(), state.teacher.bind(false));
    let fake_ws = merge_lora(
        &state.teacher.bind(false),
        &state.adapters.bind(false),
        &state.cfg.lora,
    );
    let fake_net = BoundNet::new(state.net_cfg.clone(), fake_ws);
    let g = dmd_gradient(
        &x0_gen,
        &teacher_net,
        &fake_net,
        t,
        &eps,
        Some(&cond),
        state.cfg.normalize_grad,
    )?;
    let dmd_loss = dmd_surrogate(&g, &x0_gen).mul_scalar(state.cfg.dmd_weight);
    let dmd_value = dmd_loss.item();
    if !dmd_value.is_finite() {
        return Err(PoseError::NonFinite(format!(
            "dmd loss at step {}: {dmd_value}",
            state.step
        )));
    }
    let grads = dmd_loss.backward();
    let gmap = gen_ws.collect_grads(&grads);
    let grad_norm = l2_norm(&gmap);
    state.opt_generator.step(&mut state.generator, &gmap);

    // (3) K fake-model updates on detached generator outputs
    let x0_detached = x0_gen.detach();
    let mut fake_value = f64::NAN;
    for _ in 0..state.cfg.fake_updates {
        let t_f: f64 = rng.gen_range(state.cfg.t_lo..t_hi);
        let eps_f = Tensor::new(randn(rng, &shape));
        let adapters_ws = state.adapters.bind(true);
        let fake_ws = merge_lora(&state.teacher.bind(false), &adapters_ws, &state.cfg.lora);
        let fake_net = BoundNet::new(state.net_cfg.clone(), fake_ws);
        let loss = fake_model_loss(&fake_net, &x0_detached, &eps_f, t_f, Some(&cond))?;
        fake_value = loss.item();
        if !fake_value.is_finite() {
            return Err(PoseError::NonFinite(format!(
                "fake-model loss at step {}: {fake_value}",
                state.step
            )));
        }
        let fgrads = loss.backward();
        let fmap = adapters_ws.collect_grads(&fgrads);
        state.opt_fake.step(&mut state.adapters, &fmap);
    }

    state.step += 1;
    Ok(PrimingMetrics {
        step: state.step,
        dmd_loss: dmd_value,
        fake_loss: fake_value,
        grad_norm,
    })
}

/// Run Phase I from a teacher checkpoint. Writes `phase1.{bin,json}` and a
/// JSON-lines metrics log under `out_dir`.
pub fn run_phase1(
    cfg: &Phase1Config,
    net_cfg: &NetConfig,
    teacher: &Checkpoint,
    data: &ClipBatch,
    out_dir: &Path,
    seed: u64,
) -> Result<Checkpoint> {
    let teacher_checksum = param_checksum(&teacher.params);
    let mut state = PrimingState::new(cfg.clone(), net_cfg.clone(), teacher.params.clone(), seed)?;
    let mut rng = rng_from_seed(derive_seed(seed, "phase1/train"));
    let metrics_path = out_dir.join("phase1_metrics.jsonl");
    for _ in 0..cfg.steps {
        let batch = data.sample(&mut rng, cfg.batch_size);
        let m = priming_step(&mut state, &batch, &mut rng)?;
        crate::report::append_jsonl(&metrics_path, &serde_json::to_value(&m)?)?;
    }
    debug_assert_eq!(param_checksum(&state.teacher), teacher_checksum);
    let ckpt = Checkpoint {
        params: state.generator,
        meta: CkptMeta {
            arch: serde_json::to_value(net_cfg)?,
            step: cfg.steps,
            role: "phase1".into(),
            seed,
        },
    };
    ckpt.save(&out_dir.join("phase1"))?;
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_moving_blob, BlobConfig};
    use crate::flow::FnVelocity;
    use crate::nets::init_velocity_net;

    fn tiny_net() -> NetConfig {
        NetConfig {
            channels: 1,
            height: 8,
            width: 8,
            patch: 2,
            d_model: 16,
            n_blocks: 2,
            n_heads: 2,
        }
    }

    fn tiny_data(seed: u64) -> ClipBatch {
        make_moving_blob(
            &BlobConfig {
                n_clips: 8,
                frames: 4,
                height: 8,
                width: 8,
                blob_radius: 1.5,
                ..Default::default()
            },
            seed,
        )
        .unwrap()
    }

    fn tiny_cfg() -> Phase1Config {
        Phase1Config {
            steps: 2,
            batch_size: 2,
            lr_generator: 1e-3,
            lr_fake: 1e-3,
            fake_updates: 1,
            ..Default::default()
        }
    }

    #[test]
    fn equal_models_cancel_exactly() {
        let net_cfg = tiny_net();
        let mut rng = rng_from_seed(31);
        let params = init_velocity_net(&net_cfg, &mut rng);
        let a = BoundNet::new(net_cfg.clone(), params.bind(false));
        let b = BoundNet::new(net_cfg.clone(), params.bind(false));
        let batch = tiny_data(1);
        let cond = batch.conditioning();
        let eps = Tensor::new(randn(&mut rng, batch.videos.shape()));
        let g = dmd_gradient(&batch.videos, &a, &b, 0.5, &eps, Some(&cond), false).unwrap();
        assert!(g.data().iter().all(|v| v.abs() < 1e-12));
        assert!(dmd_gradient(&batch.videos, &a, &b, 0.0, &eps, Some(&cond), false).is_err());
    }

    /// 1-D oracle: data N(0,1), generator distribution N(m,1). The real and
    /// fake scores are both Gaussian, so g = (1-t) m / ((1-t)^2 + t^2) for
    /// every sample.
    #[test]
    fn gaussian_oracle_gradient() {
        let n = 100_000;
        let mu_real = crate::flow::gaussian_optimal_velocity();
        for &(m, t) in &[(1.0, 0.3), (1.0, 0.5), (1.0, 0.8), (0.0, 0.5)] {
            // fake velocity reconstructed from the N((1-t)m, v) score of the
            // perturbed fake marginal: mu = -(t s + x) / (1 - t)
            let mu_fake = FnVelocity(move |x: &Tensor, ts: &[f64]| {
                let tv = ts[0];
                let v = (1.0 - tv) * (1.0 - tv) + tv * tv;
                let s = x.add_scalar(-(1.0 - tv) * m).mul_scalar(-1.0 / v);
                s.mul_scalar(-tv).sub(x).mul_scalar(1.0 / (1.0 - tv))
            });
            let mut rng = rng_from_seed(32);
            let z = randn(&mut rng, &[n, 1]);
            let x0 = Tensor::new(z.mapv(|v| v + m));
            let eps = Tensor::new(randn(&mut rng, &[n, 1]));
            let g = dmd_gradient(&x0, &mu_real, &mu_fake, t, &eps, None, false).unwrap();
            let v = (1.0 - t) * (1.0 - t) + t * t;
            let analytic = (1.0 - t) * m / v;
            let mean = g.data().sum() / n as f64;
            let var = g
                .data()
                .iter()
                .map(|x| (x - mean) * (x - mean))
                .sum::<f64>()
                / n as f64;
            let stderr = (var / n as f64).sqrt();
            assert!(
                (mean - analytic).abs() < 3.0 * stderr + 1e-9,
                "m={m} t={t}: mc {mean} vs analytic {analytic} (se {stderr})"
            );
        }
    }

    #[test]
    fn fake_loss_detached_from_generator() {
        let net_cfg = tiny_net();
        let mut rng = rng_from_seed(33);
        let params = init_velocity_net(&net_cfg, &mut rng);
        let gen_ws = params.bind(true);
        let gen_net = BoundNet::new(net_cfg.clone(), gen_ws.clone());
        let batch = tiny_data(2);
        let cond = batch.conditioning();
        let noise = Tensor::new(randn(&mut rng, batch.videos.shape()));
        let x0 = crate::flow::one_step_denoise(&gen_net, &noise, NoiseLevel::ENDPOINT, Some(&cond));
        // fake model shares the same architecture with separate weights
        let fake_params = init_velocity_net(&net_cfg, &mut rng);
        let fake_ws = fake_params.bind(true);
        let fake_net = BoundNet::new(net_cfg, fake_ws.clone());
        let eps = Tensor::new(randn(&mut rng, batch.videos.shape()));
        let loss = fake_model_loss(&fake_net, &x0, &eps, 0.5, Some(&cond)).unwrap();
        let grads = loss.backward();
        // gradients reach the fake model but never the generator
        assert!(!fake_ws.collect_grads(&grads).is_empty());
        assert!(gen_ws.collect_grads(&grads).is_empty());
    }

    #[test]
    fn noop_config_leaves_parameters_unchanged() {
        let net_cfg = tiny_net();
        let mut rng = rng_from_seed(34);
        let teacher = init_velocity_net(&net_cfg, &mut rng);
        let cfg = Phase1Config {
            dmd_weight: 0.0,
            fake_updates: 0,
            ..tiny_cfg()
        };
        let mut state = PrimingState::new(cfg, net_cfg, teacher.clone(), 1).unwrap();
        let before = param_checksum(&state.generator);
        let data = tiny_data(3);
        let mut rng = rng_from_seed(35);
        let batch = data.sample(&mut rng, 2);
        priming_step(&mut state, &batch, &mut rng).unwrap();
        assert_eq!(param_checksum(&state.generator), before);
    }

    #[test]
    fn run_phase1_deterministic_and_teacher_frozen() {
        let net_cfg = tiny_net();
        let mut rng = rng_from_seed(36);
        let teacher = Checkpoint {
            params: init_velocity_net(&net_cfg, &mut rng),
            meta: CkptMeta {
                arch: serde_json::to_value(&net_cfg).unwrap(),
                step: 0,
                role: "teacher".into(),
                seed: 0,
            },
        };
        let teacher_sum = param_checksum(&teacher.params);
        let data = tiny_data(4);
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg();
        let a = run_phase1(&cfg, &net_cfg, &teacher, &data, &dir.path().join("a"), 7).unwrap();
        let b = run_phase1(&cfg, &net_cfg, &teacher, &data, &dir.path().join("b"), 7).unwrap();
        assert_eq!(param_checksum(&a.params), param_checksum(&b.params));
        // training actually moved the generator
        assert_ne!(param_checksum(&a.params), teacher_sum);
        // teacher untouched
        assert_eq!(param_checksum(&teacher.params), teacher_sum);
        // metrics log exists with one record per step
        let log = crate::report::read_jsonl(&dir.path().join("a/phase1_metrics.jsonl")).unwrap();
        assert_eq!(log.len(), cfg.steps as usize);

        // zero steps: output equals the teacher weights
        let zero = Phase1Config {
            steps: 0,
            ..tiny_cfg()
        };
        let c = run_phase1(&zero, &net_cfg, &teacher, &data, &dir.path().join("c"), 7).unwrap();
        assert_eq!(param_checksum(&c.params), teacher_sum);
    }
}
