//! Phase II unified adversarial equilibrium: hinge adversarial training with
//! an EMA-shared discriminator backbone, a spatiotemporal gradient-difference
//! penalty, and a frame consistency loss anchored on the frozen real model.

use crate::ckpt::{param_checksum, Checkpoint, CkptMeta};
use crate::data::{perturb_spatiotemporal, ClipBatch, PerturbationSpec};
use crate::flow::{interpolate, one_step_denoise, Conditioning, NoiseLevel, Velocity};
use crate::nets::{
    backbone_refresh, discriminator_forward, init_semantic_head, BoundNet, EmaShadow, HeadConfig,
    NetConfig, ParamMap,
};
use crate::optim::{Adam, AdamConfig};
use crate::rng::{derive_seed, randn, rng_from_seed, PoseRng};
use crate::tensor::Tensor;
use crate::{PoseError, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Phase2Config {
    pub steps: u64,
    pub batch_size: usize,
    pub lr_generator: f64,
    pub lr_head: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// frame-consistency weight λ
    pub lambda_consist: f64,
    /// gradient-penalty weight η
    pub eta_r1: f64,
    pub ema_decay: f64,
    /// low-SNR perturbation range for the adversarial comparison
    pub t_lo: f64,
    pub t_hi: f64,
    pub perturbation: PerturbationSpec,
    /// hinge losses (default) vs. log-form non-saturating variant
    pub hinge: bool,
    /// differentiate through the input gradients (default); when false the
    /// penalty is computed on detached gradients and acts as a monitor only
    pub second_order_r1: bool,
    /// also apply the penalty on generated samples
    pub r1_on_generated: bool,
    /// scales both adversarial terms; zero disables adversarial training
    pub adv_weight: f64,
}

impl Default for Phase2Config {
    fn default() -> Self {
        Phase2Config {
            steps: 1000,
            batch_size: 32,
            lr_generator: 2e-6,
            lr_head: 2e-6,
            beta1: 0.5,
            beta2: 0.999,
            lambda_consist: 10.0,
            eta_r1: 1.0,
            ema_decay: 0.995,
            t_lo: 0.6,
            t_hi: 0.98,
            perturbation: PerturbationSpec::default(),
            hinge: true,
            second_order_r1: true,
            r1_on_generated: false,
            adv_weight: 1.0,
        }
    }
}

fn softplus(x: &Tensor) -> Tensor {
    x.exp().add_scalar(1.0).ln()
}

/// Adversarial objectives from discriminator logits on real and generated
/// inputs. Returns `(L_ADV-G, L_ADV-D)`.
pub fn adversarial_losses(d_real: &Tensor, d_fake: &Tensor, hinge: bool) -> (Tensor, Tensor) {
    if hinge {
        let l_d = d_real
            .mul_scalar(-1.0)
            .add_scalar(1.0)
            .relu()
            .mean_all()
            .add(&d_fake.add_scalar(1.0).relu().mean_all());
        let l_g = d_fake.mean_all().mul_scalar(-1.0);
        (l_g, l_d)
    } else {
        let l_d = softplus(&d_real.mul_scalar(-1.0))
            .mean_all()
            .add(&softplus(d_fake).mean_all());
        let l_g = softplus(&d_fake.mul_scalar(-1.0)).mean_all();
        (l_g, l_d)
    }
}

/// Spatiotemporal gradient-difference penalty:
/// `‖∇_x D(x_pert, t_pert) − ∇_x D(x, t)‖² / ‖ε_s + ε_t‖²` per sample,
/// batch-averaged. `d` maps an input and noise levels to per-sample logits.
pub fn st_r1_penalty<F>(
    d: F,
    x: &Tensor,
    ts: &[f64],
    spec: &PerturbationSpec,
    seed: u64,
    second_order: bool,
) -> Result<Tensor>
where
    F: Fn(&Tensor, &[f64]) -> Result<Tensor>,
{
    if spec.is_zero() {
        return Err(PoseError::InvalidArgument(
            "st_r1_penalty requires a nonzero perturbation spec".into(),
        ));
    }
    let p = perturb_spatiotemporal(x, spec, ts, seed)?;
    let b = x.shape()[0];
    let rest: usize = x.shape()[1..].iter().product();
    // per-sample squared perturbation norm (constant)
    let pert = p.eps_s.add(&p.eps_t);
    let denom = pert.detach().sqr().reshape(&[b, rest]).sum_axis_keep(1);
    if denom.data().iter().any(|&v| v == 0.0) {
        return Err(PoseError::InvalidArgument(
            "zero perturbation drawn; sigma_s/sigma_t too small".into(),
        ));
    }
    let input_grad = |inp: &Tensor, tt: &[f64]| -> Result<Tensor> {
        let leaf = Tensor::leaf(inp.data().clone());
        let logits = d(&leaf, tt)?;
        let grads = logits.sum_all().backward_with(second_order);
        grads
            .get(&leaf)
            .cloned()
            .ok_or_else(|| {
                PoseError::InvalidArgument("discriminator does not depend on its input".into())
            })
    };
    let g_base = input_grad(x, ts)?;
    let g_pert = input_grad(&p.x_pert, &p.t_pert)?;
    let num = g_pert.sub(&g_base).sqr().reshape(&[b, rest]).sum_axis_keep(1);
    Ok(num.div(&denom).mean_all())
}

/// Frame consistency loss (generator side): re-noise the detached generator
/// output, denoise once with the frozen real model, and penalize the squared
/// distance back to the generated clip. Gradient reaches the generator only
/// through the `x0_gen` term.
pub fn frame_consistency_loss(
    x0_gen: &Tensor,
    mu_real: &dyn Velocity,
    t: f64,
    eps: &Tensor,
    cond: Option<&Conditioning>,
) -> Result<Tensor> {
    let t = NoiseLevel::new(t)?;
    let x_t = interpolate(&x0_gen.detach(), eps, t)?;
    let x_hat = one_step_denoise(mu_real, &x_t, t, cond).detach();
    Ok(x0_gen.sub(&x_hat).sqr().mean_all())
}

pub struct EquilibriumState {
    pub cfg: Phase2Config,
    pub net_cfg: NetConfig,
    pub head_cfg: HeadConfig,
    pub generator: ParamMap,
    /// EMA-shared discriminator backbone θ⁻
    pub backbone: EmaShadow,
    /// semantic head ψ
    pub head: ParamMap,
    /// frozen real model
    pub teacher: ParamMap,
    pub opt_generator: Adam,
    pub opt_head: Adam,
    pub step: u64,
    divergence_streak: u32,
}

#[derive(Debug, Clone, Serialize)]
pub struct EquilibriumMetrics {
    pub step: u64,
    pub adv_g: f64,
    pub adv_d: f64,
    pub st_r1: f64,
    pub consist: f64,
    pub logit_real_mean: f64,
    pub logit_fake_mean: f64,
}

impl EquilibriumState {
    pub fn new(
        cfg: Phase2Config,
        net_cfg: NetConfig,
        init: ParamMap,
        teacher: ParamMap,
        seed: u64,
    ) -> Result<Self> {
        let head_cfg = HeadConfig::for_net(&net_cfg);
        let mut rng = rng_from_seed(derive_seed(seed, "phase2/head"));
        let head = init_semantic_head(&head_cfg, &mut rng);
        let backbone = EmaShadow::new(cfg.ema_decay, init.clone())?;
        let opt_generator = Adam::new(AdamConfig::new(cfg.lr_generator, cfg.beta1, cfg.beta2));
        let opt_head = Adam::new(AdamConfig::new(cfg.lr_head, cfg.beta1, cfg.beta2));
        Ok(EquilibriumState {
            cfg,
            net_cfg,
            head_cfg,
            generator: init,
            backbone,
            head,
            teacher,
            opt_generator,
            opt_head,
            step: 0,
            divergence_streak: 0,
        })
    }
}

fn check_finite(name: &str, v: f64, step: u64) -> Result<f64> {
    if !v.is_finite() {
        return Err(PoseError::NonFinite(format!("{name} at step {step}: {v}")));
    }
    Ok(v)
}

/// One equilibrium step: generate, perturb into the low-SNR range, update the
/// head on `L_D = L_ADV-D + η L_ST-R1`, update the generator on
/// `L_G = L_ADV-G + λ L_Consist`, then refresh the shared backbone.
pub fn equilibrium_step(
    state: &mut EquilibriumState,
    real: &ClipBatch,
    rng: &mut PoseRng,
) -> Result<EquilibriumMetrics> {
    use rand::Rng;
    let cond = real.conditioning();
    let shape = real.videos.shape().to_vec();
    let b = shape[0];

    // (1) single-step generation from fresh noise under the batch conditions
    let gen_ws = state.generator.bind(true);
    let gen_net = BoundNet::new(state.net_cfg.clone(), gen_ws.clone());
    let noise = Tensor::new(randn(rng, &shape));
    let x0 = one_step_denoise(&gen_net, &noise, NoiseLevel::ENDPOINT, Some(&cond));

    // (2) identical-in-law perturbation of real and generated clips
    let t: f64 = rng.gen_range(state.cfg.t_lo..state.cfg.t_hi);
    let eps_real = Tensor::new(randn(rng, &shape));
    let eps_fake = Tensor::new(randn(rng, &shape));
    let x_t_real = interpolate(&real.videos, &eps_real, NoiseLevel::new(t)?)?;
    let x_t_fake = interpolate(&x0, &eps_fake, NoiseLevel::new(t)?)?;

    // (3) discriminator update: ψ only, backbone and generator frozen
    let backbone_net = BoundNet::new(state.net_cfg.clone(), state.backbone.params.bind(false));
    let head_ws = state.head.bind(true);
    let d_real = discriminator_forward(&backbone_net, &head_ws, &state.head_cfg, &x_t_real, &[t], &cond)?;
    let d_fake_det = discriminator_forward(
        &backbone_net,
        &head_ws,
        &state.head_cfg,
        &x_t_fake.detach(),
        &[t],
        &cond,
    )?;
    let (_, adv_d) = adversarial_losses(&d_real, &d_fake_det, state.cfg.hinge);
    let r1_seed = rng.gen::<u64>();
    let r1 = if state.cfg.eta_r1 > 0.0 {
        let d_fn = |x: &Tensor, tt: &[f64]| {
            discriminator_forward(&backbone_net, &head_ws, &state.head_cfg, x, tt, &cond)
        };
        let mut pen = st_r1_penalty(
            d_fn,
            &x_t_real,
            &[t],
            &state.cfg.perturbation,
            r1_seed,
            state.cfg.second_order_r1,
        )?;
        if state.cfg.r1_on_generated {
            let d_fn = |x: &Tensor, tt: &[f64]| {
                discriminator_forward(&backbone_net, &head_ws, &state.head_cfg, x, tt, &cond)
            };
            let on_fake = st_r1_penalty(
                d_fn,
                &x_t_fake.detach(),
                &[t],
                &state.cfg.perturbation,
                r1_seed.wrapping_add(1),
                state.cfg.second_order_r1,
            )?;
            pen = pen.add(&on_fake).mul_scalar(0.5);
        }
        pen
    } else {
        Tensor::scalar(0.0)
    };
    let l_d = adv_d
        .mul_scalar(state.cfg.adv_weight)
        .add(&r1.mul_scalar(state.cfg.eta_r1));
    let adv_d_v = check_finite("adv_d", adv_d.item(), state.step)?;
    let r1_v = check_finite("st_r1", r1.item(), state.step)?;
    let d_grads = l_d.backward();
    let head_grads = head_ws.collect_grads(&d_grads);
    state.opt_head.step(&mut state.head, &head_grads);

    // (4) generator update: θ only, using the refreshed head frozen
    let head_frozen = state.head.bind(false);
    let d_fake = discriminator_forward(
        &backbone_net,
        &head_frozen,
        &state.head_cfg,
        &x_t_fake,
        &[t],
        &cond,
    )?;
    let (adv_g, _) = adversarial_losses(&d_real.detach(), &d_fake, state.cfg.hinge);
    let teacher_net = BoundNet::new(state.net_cfg.clone(), state.teacher.bind(false));
    let t_c: f64 = rng.gen_range(state.cfg.t_lo..state.cfg.t_hi);
    let eps_c = Tensor::new(randn(rng, &shape));
    let consist = frame_consistency_loss(&x0, &teacher_net, t_c, &eps_c, Some(&cond))?;
    let l_g = adv_g
        .mul_scalar(state.cfg.adv_weight)
        .add(&consist.mul_scalar(state.cfg.lambda_consist));
    let adv_g_v = check_finite("adv_g", adv_g.item(), state.step)?;
    let consist_v = check_finite("consist", consist.item(), state.step)?;
    let g_grads = l_g.backward();
    let gen_grads = gen_ws.collect_grads(&g_grads);
    state.opt_generator.step(&mut state.generator, &gen_grads);

    // (5) EMA backbone refresh
    backbone_refresh(&state.generator, &mut state.backbone)?;

    let logit_real = d_real.data().sum() / b as f64;
    let logit_fake = d_fake.data().sum() / b as f64;
    let max_logit = d_real
        .data()
        .iter()
        .chain(d_fake.data().iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    if max_logit > 1e3 {
        state.divergence_streak += 1;
        if state.divergence_streak >= 50 {
            return Err(PoseError::NonFinite(format!(
                "discriminator diverged: |logit| > 1e3 for 50 consecutive steps (step {})",
                state.step
            )));
        }
    } else {
        state.divergence_streak = 0;
    }

    state.step += 1;
    Ok(EquilibriumMetrics {
        step: state.step,
        adv_g: adv_g_v,
        adv_d: adv_d_v,
        st_r1: r1_v,
        consist: consist_v,
        logit_real_mean: logit_real,
        logit_fake_mean: logit_fake,
    })
}

/// Run Phase II from a Phase I (or, for the no-priming ablation, teacher)
/// checkpoint. Writes `phase2.{bin,json}` plus a JSON-lines metrics log.
pub fn run_phase2(
    cfg: &Phase2Config,
    net_cfg: &NetConfig,
    init: &Checkpoint,
    teacher: &Checkpoint,
    data: &ClipBatch,
    out_dir: &Path,
    seed: u64,
) -> Result<Checkpoint> {
    let teacher_checksum = param_checksum(&teacher.params);
    let mut state = EquilibriumState::new(
        cfg.clone(),
        net_cfg.clone(),
        init.params.clone(),
        teacher.params.clone(),
        seed,
    )?;
    let mut rng = rng_from_seed(derive_seed(seed, "phase2/train"));
    let metrics_path = out_dir.join("phase2_metrics.jsonl");
    for _ in 0..cfg.steps {
        let batch = data.sample(&mut rng, cfg.batch_size);
        let m = equilibrium_step(&mut state, &batch, &mut rng)?;
        crate::report::append_jsonl(&metrics_path, &serde_json::to_value(&m)?)?;
    }
    debug_assert_eq!(param_checksum(&state.teacher), teacher_checksum);
    let ckpt = Checkpoint {
        params: state.generator,
        meta: CkptMeta {
            arch: serde_json::to_value(net_cfg)?,
            step: cfg.steps,
            role: "phase2".into(),
            seed,
        },
    };
    ckpt.save(&out_dir.join("phase2"))?;
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_moving_blob, BlobConfig};
    use crate::nets::init_velocity_net;
    use ndarray::IxDyn;

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

    fn tiny_cfg() -> Phase2Config {
        Phase2Config {
            steps: 2,
            batch_size: 2,
            lr_generator: 1e-3,
            lr_head: 1e-3,
            ..Default::default()
        }
    }

    fn t(v: &[f64]) -> Tensor {
        Tensor::new(ndarray::arr1(v).into_dyn())
    }

    #[test]
    fn hinge_loss_cases() {
        // perfect separation inside the margin
        let (_, l_d) = adversarial_losses(&t(&[2.0]), &t(&[-2.0]), true);
        assert_eq!(l_d.item(), 0.0);
        // zero logits: margin constants
        let (l_g, l_d) = adversarial_losses(&t(&[0.0, 0.0]), &t(&[0.0, 0.0]), true);
        assert_eq!(l_d.item(), 2.0);
        assert_eq!(l_g.item(), 0.0);
        // generator loss is linear: constant logit shift changes the value
        // by -c and leaves the slope untouched
        let (a, _) = adversarial_losses(&t(&[0.0]), &t(&[0.3, -0.1]), true);
        let (b, _) = adversarial_losses(&t(&[0.0]), &t(&[1.3, 0.9]), true);
        assert!((a.item() - b.item() - 1.0).abs() < 1e-12);
        // hinge discriminator loss is bounded below by zero
        let (_, l_d) = adversarial_losses(&t(&[100.0]), &t(&[-100.0]), true);
        assert!(l_d.item() >= 0.0);
        // log-form variant is positive and finite at zero logits
        let (l_g, l_d) = adversarial_losses(&t(&[0.0]), &t(&[0.0]), false);
        assert!((l_d.item() - 2.0 * (2.0f64).ln()).abs() < 1e-12);
        assert!((l_g.item() - (2.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn st_r1_zero_for_linear_discriminator() {
        let mut rng = rng_from_seed(41);
        let x = Tensor::new(randn(&mut rng, &[2, 3, 1, 4, 4]));
        let w = Tensor::new(randn(&mut rng, &[2, 3, 1, 4, 4]));
        let d = |inp: &Tensor, _tt: &[f64]| -> crate::Result<Tensor> {
            Ok(inp.mul(&w).reshape(&[2, 48]).sum_axis_keep(1).reshape(&[2]))
        };
        let pen = st_r1_penalty(d, &x, &[0.7], &PerturbationSpec::default(), 5, true).unwrap();
        assert!(pen.item().abs() < 1e-10, "penalty {}", pen.item());
    }

    #[test]
    fn st_r1_quadratic_scaling() {
        // D(x) = a/2 ||x||^2 per sample -> gradient a x -> penalty a^2
        let mut rng = rng_from_seed(42);
        let x = Tensor::new(randn(&mut rng, &[3, 2, 1, 4, 4]));
        for &a in &[1.0, 2.5] {
            let d = move |inp: &Tensor, _tt: &[f64]| -> crate::Result<Tensor> {
                Ok(inp
                    .sqr()
                    .reshape(&[3, 32])
                    .sum_axis_keep(1)
                    .mul_scalar(0.5 * a)
                    .reshape(&[3]))
            };
            let pen = st_r1_penalty(d, &x, &[0.8], &PerturbationSpec::default(), 6, true).unwrap();
            assert!(
                (pen.item() - a * a).abs() < 1e-6,
                "a={a}: penalty {}",
                pen.item()
            );
        }
    }

    #[test]
    fn st_r1_rejects_zero_spec_and_is_nonnegative() {
        let mut rng = rng_from_seed(43);
        let x = Tensor::new(randn(&mut rng, &[2, 2, 1, 4, 4]));
        let d = |inp: &Tensor, _tt: &[f64]| -> crate::Result<Tensor> {
            Ok(inp.sqr().reshape(&[2, 32]).sum_axis_keep(1).reshape(&[2]))
        };
        let zero = PerturbationSpec {
            sigma_s: 0.0,
            sigma_t: 0.0,
            t_jitter: 0.0,
        };
        assert!(st_r1_penalty(d, &x, &[0.7], &zero, 7, true).is_err());
        let d2 = |inp: &Tensor, _tt: &[f64]| -> crate::Result<Tensor> {
            Ok(inp.sqr().reshape(&[2, 32]).sum_axis_keep(1).reshape(&[2]))
        };
        let pen = st_r1_penalty(d2, &x, &[0.7], &PerturbationSpec::default(), 7, true).unwrap();
        assert!(pen.item() >= 0.0);
    }

    #[test]
    fn st_r1_second_order_reaches_head_parameters() {
        // the penalty trains ψ: double backward through the full
        // discriminator produces finite, nonzero head gradients
        let net_cfg = tiny_net();
        let mut rng = rng_from_seed(44);
        let backbone_params = init_velocity_net(&net_cfg, &mut rng);
        let hcfg = HeadConfig::for_net(&net_cfg);
        let head = init_semantic_head(&hcfg, &mut rng);
        let sub = tiny_data(1).select(&[0, 1]);
        let cond = sub.conditioning();
        let backbone = BoundNet::new(net_cfg, backbone_params.bind(false));
        let head_ws = head.bind(true);
        let d = |x: &Tensor, tt: &[f64]| {
            discriminator_forward(&backbone, &head_ws, &hcfg, x, tt, &cond)
        };
        let pen = st_r1_penalty(d, &sub.videos, &[0.8], &PerturbationSpec::default(), 8, true)
            .unwrap();
        let grads = pen.backward();
        let hg = head_ws.collect_grads(&grads);
        assert!(!hg.is_empty());
        let norm: f64 = hg.values().map(|g| g.iter().map(|v| v * v).sum::<f64>()).sum();
        assert!(norm.is_finite() && norm > 0.0, "head grad norm {norm}");
    }

    #[test]
    fn frame_consistency_cases_and_gradient() {
        // fixed point: a perfect denoiser yields zero loss
        let x0 = Tensor::new(ndarray::ArrayD::from_elem(IxDyn(&[1, 2, 1, 2, 2]), 0.3));
        let zero_velocity = |x0v: f64| {
            crate::flow::FnVelocity(move |x: &Tensor, ts: &[f64]| {
                // velocity that denoises exactly to the constant clip x0v
                let tt = crate::flow::per_sample(ts, x);
                x.add_scalar(-x0v).div(&tt)
            })
        };
        let eps = Tensor::new(randn(&mut rng_from_seed(45), &[1, 2, 1, 2, 2]));
        let loss = frame_consistency_loss(&x0, &zero_velocity(0.3), 0.7, &eps, None).unwrap();
        assert!(loss.item() < 1e-20, "loss {}", loss.item());
        // constant offset c in the denoised estimate -> loss c^2
        let loss = frame_consistency_loss(&x0, &zero_velocity(0.3 + 0.2), 0.7, &eps, None).unwrap();
        assert!((loss.item() - 0.04).abs() < 1e-12);
        // gradient is exactly 2 (x0 - x_hat) / N, checked by finite differences
        let n = 8.0;
        let x0_leaf = Tensor::leaf(ndarray::ArrayD::from_elem(IxDyn(&[1, 2, 1, 2, 2]), 0.5));
        let loss = frame_consistency_loss(&x0_leaf, &zero_velocity(0.3), 0.7, &eps, None).unwrap();
        let grads = loss.backward();
        let g = grads.get(&x0_leaf).unwrap();
        let expected = 2.0 * (0.5 - 0.3) / n;
        assert!(g.data().iter().all(|v| (v - expected).abs() < 1e-12));
        let h = 1e-5;
        let probe = |v: f64| {
            let x = Tensor::new(ndarray::ArrayD::from_elem(IxDyn(&[1, 2, 1, 2, 2]), v));
            frame_consistency_loss(&x, &zero_velocity(0.3), 0.7, &eps, None)
                .unwrap()
                .item()
        };
        let fd = (probe(0.5 + h) - probe(0.5 - h)) / (2.0 * h) / n;
        let rel = (fd - expected).abs() / expected.abs();
        assert!(rel < 1e-4, "fd {fd} vs {expected}");
    }

    #[test]
    fn equilibrium_step_parameter_isolation() {
        let net_cfg = tiny_net();
        let mut rng = rng_from_seed(46);
        let teacher = init_velocity_net(&net_cfg, &mut rng);
        let cfg = tiny_cfg();
        let mut state = EquilibriumState::new(
            cfg,
            net_cfg,
            teacher.clone(),
            teacher.clone(),
            1,
        )
        .unwrap();
        let backbone_before = state.backbone.params.clone();
        let gen_before = state.generator.clone();
        let teacher_sum = param_checksum(&state.teacher);
        let data = tiny_data(2);
        let mut rng = rng_from_seed(47);
        let batch = data.sample(&mut rng, 2);
        let m = equilibrium_step(&mut state, &batch, &mut rng).unwrap();
        assert!(m.st_r1 >= 0.0);
        // teacher untouched; generator and head moved
        assert_eq!(param_checksum(&state.teacher), teacher_sum);
        assert_ne!(param_checksum(&state.generator), param_checksum(&gen_before));
        // backbone changed exactly by the EMA rule against the new generator
        let d = state.cfg.ema_decay;
        for (name, shadow) in state.backbone.params.raw() {
            let prev = backbone_before.get(name).unwrap();
            let live = state.generator.get(name).unwrap();
            for ((s, p), l) in shadow.iter().zip(prev.iter()).zip(live.iter()) {
                assert!((s - (d * p + (1.0 - d) * l)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn noop_config_leaves_parameters_unchanged() {
        let net_cfg = tiny_net();
        let mut rng = rng_from_seed(48);
        let teacher = init_velocity_net(&net_cfg, &mut rng);
        let cfg = Phase2Config {
            adv_weight: 0.0,
            eta_r1: 0.0,
            lambda_consist: 0.0,
            ..tiny_cfg()
        };
        let mut state =
            EquilibriumState::new(cfg, net_cfg, teacher.clone(), teacher.clone(), 1).unwrap();
        let gen_sum = param_checksum(&state.generator);
        let head_sum = param_checksum(&state.head);
        let data = tiny_data(3);
        let mut rng = rng_from_seed(49);
        let batch = data.sample(&mut rng, 2);
        equilibrium_step(&mut state, &batch, &mut rng).unwrap();
        assert_eq!(param_checksum(&state.generator), gen_sum);
        assert_eq!(param_checksum(&state.head), head_sum);
        // with generator == backbone init, the EMA fixed point holds (up to
        // rounding in d*s + (1-d)*s)
        for (name, shadow) in state.backbone.params.raw() {
            let live = state.generator.get(name).unwrap();
            for (s, l) in shadow.iter().zip(live.iter()) {
                assert!((s - l).abs() <= 1e-15 * l.abs().max(1.0), "{name}");
            }
        }
    }

    #[test]
    fn run_phase2_deterministic() {
        let net_cfg = tiny_net();
        let mut rng = rng_from_seed(50);
        let params = init_velocity_net(&net_cfg, &mut rng);
        let ck = |role: &str| Checkpoint {
            params: params.clone(),
            meta: CkptMeta {
                arch: serde_json::to_value(&net_cfg).unwrap(),
                step: 0,
                role: role.into(),
                seed: 0,
            },
        };
        let data = tiny_data(4);
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg();
        let a = run_phase2(&cfg, &net_cfg, &ck("phase1"), &ck("teacher"), &data, &dir.path().join("a"), 9)
            .unwrap();
        let b = run_phase2(&cfg, &net_cfg, &ck("phase1"), &ck("teacher"), &data, &dir.path().join("b"), 9)
            .unwrap();
        assert_eq!(param_checksum(&a.params), param_checksum(&b.params));
        let log = crate::report::read_jsonl(&dir.path().join("a/phase2_metrics.jsonl")).unwrap();
        assert_eq!(log.len(), cfg.steps as usize);
        assert!(log[0].get("logit_real_mean").is_some());
    }
}
