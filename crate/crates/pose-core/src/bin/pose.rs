//! Command-line driver for the two-phase distillation pipeline.
//!
//! Exit codes: 0 success, 1 configuration error, 2 training failure,
//! 3 evaluation failure.

use anyhow::Context;
use clap::{Parser, Subcommand};
use pose_core::ckpt::Checkpoint;
use pose_core::config::{ExperimentSpec, OUTPUT_ROOT_ENV};
use pose_core::data::{load_clips, make_moving_blob, save_clips};
use pose_core::eval::{evaluate_model, Normalizers};
use pose_core::nets::BoundNet;
use pose_core::rng::derive_seed;
use std::path::PathBuf;
use std::process::ExitCode;

const EXIT_CONFIG: u8 = 1;
const EXIT_TRAINING: u8 = 2;
const EXIT_EVALUATION: u8 = 3;

#[derive(Parser)]
#[command(name = "pose", version, about = "Two-phase one-step distillation of flow-matching video generators")]
struct Cli {
    /// experiment spec (JSON); defaults are used when omitted
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// base random seed
    #[arg(long, global = true, default_value_t = 1)]
    seed: u64,
    /// output directory (also settable via POSE_OUTPUT_ROOT)
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// reuse cached stages recorded in the run manifest (always honored by
    /// `ablate`; stage subcommands rewrite their own outputs)
    #[arg(long, global = true, default_value_t = true)]
    resume: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the moving-blob dataset
    Data,
    /// Pretrain the multi-step teacher
    TrainTeacher,
    /// Phase I stability priming from a teacher checkpoint
    Phase1 {
        /// teacher checkpoint stem (without extension)
        #[arg(long)]
        teacher: PathBuf,
    },
    /// Phase II adversarial equilibrium from a priming (or teacher) checkpoint
    Phase2 {
        /// initial generator checkpoint stem
        #[arg(long)]
        init: PathBuf,
        /// frozen real-model checkpoint stem
        #[arg(long)]
        teacher: PathBuf,
    },
    /// Train one comparison baseline
    Baseline {
        /// method tag: lcm, add or dmd2
        #[arg(long)]
        method: String,
        #[arg(long)]
        teacher: PathBuf,
    },
    /// Evaluate a checkpoint against a dataset
    Eval {
        /// checkpoint stem
        #[arg(long)]
        ckpt: PathBuf,
        /// dataset directory written by `pose data`
        #[arg(long)]
        dataset: PathBuf,
        /// sampler steps
        #[arg(long, default_value_t = 1)]
        steps: usize,
        /// double the NFE accounting for guided sampling
        #[arg(long, default_value_t = false)]
        guided: bool,
    },
    /// Run the full pipeline and ablation grid over all configured seeds
    Ablate,
    /// Render the markdown/CSV/image report from cached artifacts
    Report,
}

fn load_spec(cli: &Cli) -> anyhow::Result<ExperimentSpec> {
    let mut spec = match &cli.config {
        Some(path) => ExperimentSpec::load(path)
            .with_context(|| format!("loading spec from {}", path.display()))?,
        None => ExperimentSpec::default(),
    };
    if let Some(out) = &cli.out {
        spec.output_root = out.clone();
    }
    spec.validate()?;
    Ok(spec)
}

fn out_dir(cli: &Cli, spec: &ExperimentSpec) -> PathBuf {
    if let Some(out) = &cli.out {
        return out.clone();
    }
    match std::env::var(OUTPUT_ROOT_ENV) {
        Ok(v) if !v.is_empty() => PathBuf::from(v),
        _ => spec.output_root.clone(),
    }
}

fn run(cli: &Cli) -> Result<(), (u8, anyhow::Error)> {
    let cfg_err = |e: anyhow::Error| (EXIT_CONFIG, e);
    let train_err = |e: anyhow::Error| (EXIT_TRAINING, e);
    let eval_err = |e: anyhow::Error| (EXIT_EVALUATION, e);
    let spec = load_spec(cli).map_err(cfg_err)?;
    let out = out_dir(cli, &spec);
    let seed = cli.seed;
    match &cli.command {
        Command::Data => {
            let batch = make_moving_blob(&spec.data, derive_seed(seed, "data"))
                .map_err(|e| train_err(e.into()))?;
            save_clips(&out.join("data"), &batch, &spec.data, seed)
                .map_err(|e| train_err(e.into()))?;
            println!("wrote {} clips to {}", batch.len(), out.join("data").display());
        }
        Command::TrainTeacher => {
            let batch = pose_core::runner::load_or_make_data(&spec, &out, seed)
                .map_err(|e| train_err(e.into()))?;
            let ckpt =
                pose_core::runner::train_teacher(&spec.teacher, &spec.net, &batch, &out, seed)
                    .map_err(|e| train_err(e.into()))?;
            println!("teacher trained for {} steps -> {}", ckpt.meta.step, out.join("teacher").display());
        }
        Command::Phase1 { teacher } => {
            let teacher = Checkpoint::load(teacher).map_err(|e| cfg_err(e.into()))?;
            let batch = pose_core::runner::load_or_make_data(&spec, &out, seed)
                .map_err(|e| train_err(e.into()))?;
            let ckpt =
                pose_core::phase1::run_phase1(&spec.phase1, &spec.net, &teacher, &batch, &out, seed)
                    .map_err(|e| train_err(e.into()))?;
            println!("phase1 done at step {} -> {}", ckpt.meta.step, out.join("phase1").display());
        }
        Command::Phase2 { init, teacher } => {
            let init = Checkpoint::load(init).map_err(|e| cfg_err(e.into()))?;
            let teacher = Checkpoint::load(teacher).map_err(|e| cfg_err(e.into()))?;
            let batch = pose_core::runner::load_or_make_data(&spec, &out, seed)
                .map_err(|e| train_err(e.into()))?;
            let ckpt = pose_core::phase2::run_phase2(
                &spec.phase2,
                &spec.net,
                &init,
                &teacher,
                &batch,
                &out,
                seed,
            )
            .map_err(|e| train_err(e.into()))?;
            println!("phase2 done at step {} -> {}", ckpt.meta.step, out.join("phase2").display());
        }
        Command::Baseline { method, teacher } => {
            let method: pose_core::baselines::BaselineMethod =
                method.parse().map_err(|e: pose_core::PoseError| cfg_err(e.into()))?;
            let bcfg = spec
                .baselines
                .iter()
                .find(|b| b.method == method)
                .cloned()
                .unwrap_or_else(|| pose_core::baselines::BaselineConfig {
                    method,
                    ..Default::default()
                });
            let teacher = Checkpoint::load(teacher).map_err(|e| cfg_err(e.into()))?;
            let batch = pose_core::runner::load_or_make_data(&spec, &out, seed)
                .map_err(|e| train_err(e.into()))?;
            let ckpt =
                pose_core::baselines::run_baseline(&bcfg, &spec.net, &teacher, &batch, &out, seed)
                    .map_err(|e| train_err(e.into()))?;
            println!("baseline {} done -> role {}", ckpt.meta.step, ckpt.meta.role);
        }
        Command::Eval {
            ckpt,
            dataset,
            steps,
            guided,
        } => {
            let ckpt = Checkpoint::load(ckpt).map_err(|e| cfg_err(e.into()))?;
            let reference = load_clips(dataset).map_err(|e| cfg_err(e.into()))?;
            let net = BoundNet::new(spec.net.clone(), ckpt.params.bind(false));
            let report = evaluate_model(
                &net,
                &reference,
                *steps,
                *guided,
                spec.eval.n_projections,
                derive_seed(seed, "eval/noise"),
                &Normalizers::unit(),
            )
            .map_err(|e| eval_err(e.into()))?;
            std::fs::create_dir_all(&out).map_err(|e| eval_err(e.into()))?;
            let json = out.join("report.json");
            std::fs::write(&json, serde_json::to_string_pretty(&report).unwrap())
                .map_err(|e| eval_err(e.into()))?;
            println!("{}", serde_json::to_string_pretty(&report).unwrap());
            println!("report written to {}", json.display());
        }
        Command::Ablate => {
            let results =
                pose_core::runner::run_ablations(&spec).map_err(|e| train_err(e.into()))?;
            println!(
                "ablations complete: {} priming, {} lambda, {} backbone cells",
                results.priming.len(),
                results.lambda.len(),
                results.backbone.len()
            );
        }
        Command::Report => {
            let dir = pose_core::runner::emit_report(&spec).map_err(|e| eval_err(e.into()))?;
            println!("report written to {}", dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err((code, err)) => {
            eprintln!("error: {err:#}");
            ExitCode::from(code)
        }
    }
}
