//! Experiment orchestration: teacher pretraining, the two-phase distillation
//! pipeline, baseline training, the ablation grid, and report emission.
//!
//! Every stage writes its artifacts under `<output_root>/seed<N>/` and is
//! recorded in a per-seed run manifest keyed by the spec hash; rerunning with
//! an unchanged spec loads cached artifacts instead of retraining.

use crate::baselines::run_baseline;
use crate::ckpt::{Checkpoint, CkptMeta};
use crate::config::ExperimentSpec;
use crate::data::{load_clips, make_moving_blob, save_clips, ClipBatch};
use crate::eval::{evaluate_model, EvalReport, Normalizers};
use crate::flow::{diffusion_loss, FlowBatch};
use crate::nets::{init_velocity_net, BoundNet, NetConfig};
use crate::optim::{Adam, AdamConfig};
use crate::rng::{derive_seed, randn, rng_from_seed, uniform};
use crate::tensor::Tensor;
use crate::{PoseError, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// Crate version stamped into manifests and reports.
pub fn version() -> &'static str {
    env!("CARGO_PKG_VERSION")
}

fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Median of a slice; mean of the two central values for even lengths.
pub fn median(xs: &[f64]) -> f64 {
    assert!(!xs.is_empty(), "median of empty slice");
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

// ---- run manifest ----

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageRecord {
    /// artifact path relative to the manifest's directory
    pub path: String,
    pub step: u64,
    pub completed_unix: u64,
}

/// Append-only record of completed stages for one seed. Invalidated as a
/// whole when the spec hash changes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub spec_hash: String,
    pub version: String,
    pub stages: BTreeMap<String, StageRecord>,
}

impl RunManifest {
    pub fn path_in(dir: &Path) -> PathBuf {
        dir.join("manifest.json")
    }

    /// Load the manifest for `dir`, starting fresh when absent or when the
    /// recorded spec hash no longer matches.
    pub fn load_or_new(dir: &Path, spec_hash: &str) -> RunManifest {
        let path = Self::path_in(dir);
        if let Ok(text) = std::fs::read_to_string(&path) {
            if let Ok(m) = serde_json::from_str::<RunManifest>(&text) {
                if m.spec_hash == spec_hash {
                    return m;
                }
            }
        }
        RunManifest {
            spec_hash: spec_hash.to_string(),
            version: version().to_string(),
            stages: BTreeMap::new(),
        }
    }

    pub fn record(&mut self, stage: &str, path: &str, step: u64) {
        self.stages.insert(
            stage.to_string(),
            StageRecord {
                path: path.to_string(),
                step,
                completed_unix: unix_now(),
            },
        );
    }

    pub fn is_done(&self, stage: &str) -> bool {
        self.stages.contains_key(stage)
    }

    /// Atomic write: serialize to a temp file, then rename into place.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let path = Self::path_in(dir);
        let tmp = dir.join("manifest.json.tmp");
        std::fs::write(&tmp, serde_json::to_string_pretty(self)?)?;
        std::fs::rename(&tmp, &path)?;
        Ok(())
    }
}

// ---- teacher pretraining ----

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TeacherMetrics {
    pub step: u64,
    pub loss: f64,
}

/// Train the multi-step teacher with the flow-matching regression loss.
/// Writes `teacher.{bin,json}` and a JSON-lines metrics log under `out_dir`.
pub fn train_teacher(
    cfg: &crate::config::TeacherConfig,
    net_cfg: &NetConfig,
    data: &ClipBatch,
    out_dir: &Path,
    seed: u64,
) -> Result<Checkpoint> {
    let mut init_rng = rng_from_seed(derive_seed(seed, "teacher/init"));
    let mut params = init_velocity_net(net_cfg, &mut init_rng);
    let mut opt = Adam::new(AdamConfig::new(cfg.lr, cfg.beta1, cfg.beta2));
    let mut rng = rng_from_seed(derive_seed(seed, "teacher/train"));
    let metrics_path = out_dir.join("teacher_metrics.jsonl");
    for step in 0..cfg.steps {
        let batch = data.sample(&mut rng, cfg.batch_size);
        let shape = batch.videos.shape().to_vec();
        let eps = Tensor::new(randn(&mut rng, &shape));
        let ts: Vec<f64> = (0..batch.len()).map(|_| uniform(&mut rng, 0.0, 1.0)).collect();
        let binding = params.bind(true);
        let model = BoundNet::new(net_cfg.clone(), binding.clone());
        let fb = FlowBatch {
            x0: batch.videos.detach(),
            eps,
            ts,
            cond: Some(batch.conditioning()),
        };
        let loss = diffusion_loss(&model, &fb)?;
        let lv = loss.item();
        if !lv.is_finite() {
            return Err(PoseError::NonFinite(format!(
                "teacher loss at step {step}"
            )));
        }
        let grads = loss.backward();
        opt.step(&mut params, &binding.collect_grads(&grads));
        crate::report::append_jsonl(
            &metrics_path,
            &serde_json::to_value(TeacherMetrics { step, loss: lv })?,
        )?;
    }
    let ckpt = Checkpoint {
        params,
        meta: CkptMeta {
            arch: serde_json::to_value(net_cfg)?,
            step: cfg.steps,
            role: "teacher".into(),
            seed,
        },
    };
    ckpt.save(&out_dir.join("teacher"))?;
    Ok(ckpt)
}

// ---- pipeline ----

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRecord {
    pub model: String,
    pub steps: usize,
    pub report: EvalReport,
}

pub struct PipelineOutcome {
    pub out_dir: PathBuf,
    pub teacher: Checkpoint,
    pub phase1: Checkpoint,
    pub phase2: Checkpoint,
    pub baselines: BTreeMap<String, Checkpoint>,
    pub evals: Vec<EvalRecord>,
    pub normalizers: Normalizers,
}

fn load_or_train<F>(
    manifest: &mut RunManifest,
    out_dir: &Path,
    stage: &str,
    stem: &str,
    step: u64,
    train: F,
) -> Result<Checkpoint>
where
    F: FnOnce() -> Result<Checkpoint>,
{
    let stem_path = out_dir.join(stem);
    if manifest.is_done(stage) && Checkpoint::exists(&stem_path) {
        return Checkpoint::load(&stem_path);
    }
    let ckpt = train()?;
    manifest.record(stage, stem, step);
    manifest.save(out_dir)?;
    Ok(ckpt)
}

fn eval_cached(
    manifest: &mut RunManifest,
    out_dir: &Path,
    record_name: &str,
    model: &dyn crate::flow::Velocity,
    reference: &ClipBatch,
    steps: usize,
    guided: bool,
    n_projections: usize,
    seed: u64,
    norms: &Normalizers,
) -> Result<EvalReport> {
    let rel = format!("eval/{record_name}.json");
    let path = out_dir.join(&rel);
    if manifest.is_done(&rel) && path.exists() {
        let rec: EvalRecord = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
        return Ok(rec.report);
    }
    let report = evaluate_model(model, reference, steps, guided, n_projections, seed, norms)?;
    let rec = EvalRecord {
        model: record_name.to_string(),
        steps,
        report: report.clone(),
    };
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(&path, serde_json::to_string_pretty(&rec)?)?;
    manifest.record(&rel, &rel, steps as u64);
    manifest.save(out_dir)?;
    Ok(report)
}

fn bound(ckpt: &Checkpoint, net_cfg: &NetConfig) -> BoundNet {
    BoundNet::new(net_cfg.clone(), ckpt.params.bind(false))
}

/// Load the cached dataset for one seed, generating and saving it on first
/// use.
pub fn load_or_make_data(spec: &ExperimentSpec, out_dir: &Path, seed: u64) -> Result<ClipBatch> {
    let data_dir = out_dir.join("data");
    if let Ok(batch) = load_clips(&data_dir) {
        return Ok(batch);
    }
    let batch = make_moving_blob(&spec.data, derive_seed(seed, "data"))?;
    save_clips(&data_dir, &batch, &spec.data, seed)?;
    Ok(batch)
}

/// Full single-seed pipeline: data, teacher, Phase I, Phase II, baselines,
/// then evaluation of every model at every configured step count. Completed
/// stages are loaded from disk; failures leave earlier stages cached.
pub fn run_pipeline(spec: &ExperimentSpec, seed: u64) -> Result<PipelineOutcome> {
    spec.validate()?;
    let out_dir = spec.resolved_output_root().join(format!("seed{seed}"));
    std::fs::create_dir_all(&out_dir)?;
    let mut manifest = RunManifest::load_or_new(&out_dir, &spec.hash());

    let data = load_or_make_data(spec, &out_dir, seed)?;

    let teacher = load_or_train(&mut manifest, &out_dir, "teacher", "teacher", spec.teacher.steps, || {
        train_teacher(&spec.teacher, &spec.net, &data, &out_dir, seed)
    })?;
    let phase1 = load_or_train(&mut manifest, &out_dir, "phase1", "phase1", spec.phase1.steps, || {
        crate::phase1::run_phase1(&spec.phase1, &spec.net, &teacher, &data, &out_dir, seed)
    })?;
    let phase2 = load_or_train(&mut manifest, &out_dir, "phase2", "phase2", spec.phase2.steps, || {
        crate::phase2::run_phase2(&spec.phase2, &spec.net, &phase1, &teacher, &data, &out_dir, seed)
    })?;

    let mut baselines = BTreeMap::new();
    for bcfg in &spec.baselines {
        let tag = format!("{:?}", bcfg.method).to_lowercase();
        let stage = format!("baseline-{tag}");
        let ckpt = load_or_train(&mut manifest, &out_dir, &stage, &stage, bcfg.steps, || {
            run_baseline(bcfg, &spec.net, &teacher, &data, &out_dir, seed)
        })?;
        baselines.insert(tag, ckpt);
    }

    // Normalizers come from the teacher's highest-step run, making composite
    // scores comparable across all models within one seed.
    let max_steps = *spec.eval.steps_list.iter().max().unwrap();
    let eval_seed = derive_seed(seed, "eval/noise");
    let teacher_net = bound(&teacher, &spec.net);
    let base_report = eval_cached(
        &mut manifest,
        &out_dir,
        &format!("teacher_steps{max_steps}_raw"),
        &teacher_net,
        &data,
        max_steps,
        spec.eval.guided_teacher,
        spec.eval.n_projections,
        eval_seed,
        &Normalizers::unit(),
    )?;
    let norms = Normalizers::from_report(&base_report);

    let mut evals = Vec::new();
    let mut models: Vec<(String, Checkpoint)> = vec![
        ("teacher".into(), teacher.clone()),
        ("pose".into(), phase2.clone()),
        ("pose-phase1".into(), phase1.clone()),
    ];
    for (tag, ckpt) in &baselines {
        models.push((tag.clone(), ckpt.clone()));
    }
    for (name, ckpt) in &models {
        let net = bound(ckpt, &spec.net);
        // teacher runs at every step count; one-step students also get the
        // multi-step grid so degradation is visible in the tables
        for &steps in &spec.eval.steps_list {
            let guided = name == "teacher" && spec.eval.guided_teacher;
            let report = eval_cached(
                &mut manifest,
                &out_dir,
                &format!("{name}_steps{steps}"),
                &net,
                &data,
                steps,
                guided,
                spec.eval.n_projections,
                eval_seed,
                &norms,
            )?;
            evals.push(EvalRecord {
                model: name.clone(),
                steps,
                report,
            });
        }
    }

    // sanity: a healthy teacher improves with more sampling steps
    let t1 = evals
        .iter()
        .find(|e| e.model == "teacher" && e.steps == 1)
        .map(|e| e.report.sliced_wasserstein);
    let tmax = evals
        .iter()
        .find(|e| e.model == "teacher" && e.steps == max_steps)
        .map(|e| e.report.sliced_wasserstein);
    if let (Some(sw1), Some(swm)) = (t1, tmax) {
        if swm >= sw1 {
            eprintln!(
                "warning: teacher {max_steps}-step SW {swm:.4} not better than 1-step SW {sw1:.4} (seed {seed})"
            );
        }
    }

    Ok(PipelineOutcome {
        out_dir,
        teacher,
        phase1,
        phase2,
        baselines,
        evals,
        normalizers: norms,
    })
}

// ---- ablations ----

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationCell {
    pub label: String,
    pub seed_composites: Vec<f64>,
    pub median_composite: f64,
    pub median_sliced_wasserstein: f64,
    pub median_condition_mse: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationResults {
    pub priming: Vec<AblationCell>,
    pub lambda: Vec<AblationCell>,
    pub backbone: Vec<AblationCell>,
}

fn cell_from_reports(label: &str, reports: &[EvalReport]) -> AblationCell {
    let comps: Vec<f64> = reports.iter().map(|r| r.composite).collect();
    AblationCell {
        label: label.to_string(),
        median_composite: median(&comps),
        median_sliced_wasserstein: median(
            &reports.iter().map(|r| r.sliced_wasserstein).collect::<Vec<_>>(),
        ),
        median_condition_mse: median(
            &reports.iter().map(|r| r.condition_mse).collect::<Vec<_>>(),
        ),
        seed_composites: comps,
    }
}

/// Train one ablation variant of Phase II and evaluate it one-step.
fn ablation_phase2(
    spec: &ExperimentSpec,
    pipeline: &PipelineOutcome,
    data: &ClipBatch,
    label: &str,
    cfg: &crate::phase2::Phase2Config,
    init: &Checkpoint,
    seed: u64,
) -> Result<EvalReport> {
    let out_dir = pipeline.out_dir.join("ablation").join(label);
    std::fs::create_dir_all(&out_dir)?;
    let mut manifest = RunManifest::load_or_new(&out_dir, &spec.hash());
    let ckpt = load_or_train(&mut manifest, &out_dir, "phase2", "phase2", cfg.steps, || {
        crate::phase2::run_phase2(cfg, &spec.net, init, &pipeline.teacher, data, &out_dir, seed)
    })?;
    let net = bound(&ckpt, &spec.net);
    eval_cached(
        &mut manifest,
        &out_dir,
        "onestep",
        &net,
        data,
        1,
        false,
        spec.eval.n_projections,
        derive_seed(seed, "eval/noise"),
        &pipeline.normalizers,
    )
}

/// Grid of Phase II ablations: priming variant, consistency weight λ, and
/// discriminator-backbone mode, each reported as the median over all seeds.
pub fn run_ablations(spec: &ExperimentSpec) -> Result<AblationResults> {
    spec.validate()?;
    let mut priming: BTreeMap<String, Vec<EvalReport>> = BTreeMap::new();
    let mut lambda: BTreeMap<String, Vec<EvalReport>> = BTreeMap::new();
    let mut backbone: BTreeMap<String, Vec<EvalReport>> = BTreeMap::new();

    for &seed in &spec.seeds {
        let pipeline = run_pipeline(spec, seed)?;
        let data = load_or_make_data(spec, &pipeline.out_dir, seed)?;
        let default_onestep = pipeline
            .evals
            .iter()
            .find(|e| e.model == "pose" && e.steps == 1)
            .map(|e| e.report.clone())
            .ok_or_else(|| PoseError::Missing("pose one-step evaluation".into()))?;

        for variant in &spec.ablation.phase1_variants {
            let report = match variant.as_str() {
                // the default priming is the main pipeline run itself
                "pose-i" => default_onestep.clone(),
                "none" => ablation_phase2(
                    spec,
                    &pipeline,
                    &data,
                    "prime-none",
                    &spec.phase2,
                    &pipeline.teacher,
                    seed,
                )?,
                "lcm" => {
                    let init = pipeline.baselines.get("lcm").ok_or_else(|| {
                        PoseError::Missing("lcm baseline required for the lcm priming variant".into())
                    })?;
                    ablation_phase2(spec, &pipeline, &data, "prime-lcm", &spec.phase2, init, seed)?
                }
                other => {
                    return Err(PoseError::InvalidArgument(format!(
                        "unknown priming variant {other:?}"
                    )))
                }
            };
            priming.entry(variant.clone()).or_default().push(report);
        }

        for &lam in &spec.ablation.lambda_grid {
            let report = if lam == spec.phase2.lambda_consist {
                default_onestep.clone()
            } else {
                let mut cfg = spec.phase2.clone();
                cfg.lambda_consist = lam;
                let label = format!("lambda-{lam}");
                ablation_phase2(spec, &pipeline, &data, &label, &cfg, &pipeline.phase1, seed)?
            };
            lambda.entry(format!("{lam}")).or_default().push(report);
        }

        for mode in &spec.ablation.backbones {
            let report = match mode.as_str() {
                "ema" => default_onestep.clone(),
                "frozen" => {
                    let mut cfg = spec.phase2.clone();
                    cfg.ema_decay = 1.0;
                    ablation_phase2(
                        spec,
                        &pipeline,
                        &data,
                        "backbone-frozen",
                        &cfg,
                        &pipeline.phase1,
                        seed,
                    )?
                }
                other => {
                    return Err(PoseError::InvalidArgument(format!(
                        "unknown backbone mode {other:?}"
                    )))
                }
            };
            backbone.entry(mode.clone()).or_default().push(report);
        }
    }

    let collect = |m: &BTreeMap<String, Vec<EvalReport>>, order: &[String]| -> Vec<AblationCell> {
        order
            .iter()
            .filter_map(|k| m.get(k.as_str()).map(|rs| cell_from_reports(k, rs)))
            .collect()
    };
    let results = AblationResults {
        priming: collect(&priming, &spec.ablation.phase1_variants),
        lambda: collect(
            &lambda,
            &spec
                .ablation
                .lambda_grid
                .iter()
                .map(|l| format!("{l}"))
                .collect::<Vec<_>>(),
        ),
        backbone: collect(&backbone, &spec.ablation.backbones),
    };
    let out = spec.resolved_output_root().join("ablations");
    std::fs::create_dir_all(&out)?;
    std::fs::write(
        out.join("results.json"),
        serde_json::to_string_pretty(&results)?,
    )?;
    Ok(results)
}

// ---- report emission ----

fn fmt4(v: f64) -> String {
    format!("{v:.4}")
}

fn loss_series(path: &Path, key: &str) -> Vec<(f64, f64)> {
    match crate::report::read_jsonl(path) {
        Ok(records) => records
            .iter()
            .filter_map(|r| {
                let s = r.get("step")?.as_f64()?;
                let v = r.get(key)?.as_f64()?;
                v.is_finite().then_some((s, v))
            })
            .collect(),
        Err(_) => Vec::new(),
    }
}

/// Render the final report: markdown summary, loss curves, sample grids and
/// animated clips, plus machine-readable CSV/JSON tables. Reads only cached
/// artifacts, so regeneration from an unchanged run tree is byte-identical.
pub fn emit_report(spec: &ExperimentSpec) -> Result<PathBuf> {
    let root = spec.resolved_output_root();
    let report_dir = root.join("report");
    std::fs::create_dir_all(&report_dir)?;
    let first_seed = spec.seeds[0];
    let seed_dir = root.join(format!("seed{first_seed}"));
    if !RunManifest::path_in(&seed_dir).exists() {
        std::fs::write(
            report_dir.join("summary.md"),
            "# Results\n\nNo completed runs found; run the pipeline first.\n",
        )?;
        return Ok(report_dir);
    }

    // evaluation table: per model and step count, median over seeds
    let mut rows: BTreeMap<(String, usize), Vec<EvalReport>> = BTreeMap::new();
    for &seed in &spec.seeds {
        let eval_dir = root.join(format!("seed{seed}")).join("eval");
        let Ok(entries) = std::fs::read_dir(&eval_dir) else {
            continue;
        };
        for entry in entries.flatten() {
            let name = entry.file_name().to_string_lossy().to_string();
            if !name.ends_with(".json") || name.ends_with("_raw.json") {
                continue;
            }
            if let Ok(rec) =
                serde_json::from_str::<EvalRecord>(&std::fs::read_to_string(entry.path())?)
            {
                let model = rec
                    .model
                    .rsplit_once("_steps")
                    .map(|(m, _)| m.to_string())
                    .unwrap_or(rec.model.clone());
                rows.entry((model, rec.steps)).or_default().push(rec.report);
            }
        }
    }

    let mut csv_rows = Vec::new();
    let mut md = String::new();
    md.push_str("# Results\n\n");
    md.push_str(&format!(
        "Version {} — spec hash `{}` — medians over {} seed(s).\n\n",
        version(),
        spec.hash(),
        spec.seeds.len()
    ));
    md.push_str("| model | steps | NFE | SW | MMD | smooth | consist | cond MSE | composite |\n");
    md.push_str("|---|---|---|---|---|---|---|---|---|\n");
    for ((model, steps), reports) in &rows {
        let get = |f: fn(&EvalReport) -> f64| median(&reports.iter().map(f).collect::<Vec<_>>());
        let nfe = reports[0].nfe;
        let cells = [
            model.clone(),
            steps.to_string(),
            nfe.to_string(),
            fmt4(get(|r| r.sliced_wasserstein)),
            fmt4(get(|r| r.mmd_rbf)),
            fmt4(get(|r| r.motion_smoothness)),
            fmt4(get(|r| r.subject_consistency)),
            fmt4(get(|r| r.condition_mse)),
            fmt4(get(|r| r.composite)),
        ];
        md.push_str(&format!("| {} |\n", cells.join(" | ")));
        csv_rows.push(cells.to_vec());
    }
    crate::report::write_csv(
        &report_dir.join("main_results.csv"),
        &[
            "model",
            "steps",
            "nfe",
            "sliced_wasserstein",
            "mmd_rbf",
            "motion_smoothness",
            "subject_consistency",
            "condition_mse",
            "composite",
        ],
        &csv_rows,
    )?;

    // ablation tables, when present
    let ab_path = root.join("ablations").join("results.json");
    if let Ok(text) = std::fs::read_to_string(&ab_path) {
        if let Ok(results) = serde_json::from_str::<AblationResults>(&text) {
            for (title, cells) in [
                ("Priming variant", &results.priming),
                ("Consistency weight", &results.lambda),
                ("Discriminator backbone", &results.backbone),
            ] {
                md.push_str(&format!(
                    "\n## {title}\n\n| variant | composite | SW | cond MSE |\n|---|---|---|---|\n"
                ));
                let mut table = Vec::new();
                for c in cells {
                    let row = [
                        c.label.clone(),
                        fmt4(c.median_composite),
                        fmt4(c.median_sliced_wasserstein),
                        fmt4(c.median_condition_mse),
                    ];
                    md.push_str(&format!("| {} |\n", row.join(" | ")));
                    table.push(row.to_vec());
                }
                let slug = title.to_lowercase().replace(' ', "_");
                crate::report::write_csv(
                    &report_dir.join(format!("ablation_{slug}.csv")),
                    &["variant", "composite", "sliced_wasserstein", "condition_mse"],
                    &table,
                )?;
            }
        }
    }

    // loss curves from the first seed's logs
    let curves: [(&str, &str, &str); 4] = [
        ("teacher_metrics.jsonl", "loss", "teacher_loss"),
        ("phase1_metrics.jsonl", "dmd_loss", "phase1_dmd_loss"),
        ("phase2_metrics.jsonl", "adv_g", "phase2_adv_g"),
        ("phase2_metrics.jsonl", "consist", "phase2_consistency"),
    ];
    md.push_str("\n## Training curves\n\n");
    for (file, key, out_name) in curves {
        let series = loss_series(&seed_dir.join(file), key);
        if series.is_empty() {
            continue;
        }
        let svg = format!("{out_name}.svg");
        crate::report::render_line_chart_svg(
            &report_dir.join(&svg),
            out_name,
            &[(key.to_string(), series)],
        )?;
        md.push_str(&format!("![{out_name}]({svg})\n"));
    }

    // sample grids and clips at each configured step count, first seed
    md.push_str("\n## Samples\n\n");
    if let (Ok(teacher), Ok(phase2)) = (
        Checkpoint::load(&seed_dir.join("teacher")),
        Checkpoint::load(&seed_dir.join("phase2")),
    ) {
        let data = load_or_make_data(spec, &seed_dir, first_seed)?;
        let n_show = data.len().min(6);
        let show: Vec<usize> = (0..n_show).collect();
        let small = data.select(&show);
        let cond = small.conditioning();
        let shape = small.videos.shape().to_vec();
        let mut rng = rng_from_seed(derive_seed(first_seed, "report/noise"));
        let noise = Tensor::new(randn(&mut rng, &shape));
        crate::report::save_sample_grid_png(&report_dir.join("real.png"), &small.videos, 8)?;
        md.push_str("![real](real.png)\n");
        for (name, ckpt, steps_list) in [
            ("teacher", &teacher, spec.eval.steps_list.clone()),
            ("pose", &phase2, vec![1]),
        ] {
            let net = bound(ckpt, &spec.net);
            for steps in steps_list {
                let (samples, _) = crate::flow::euler_sample(&net, &noise, steps, Some(&cond))?;
                let samples = samples.detach();
                let png = format!("{name}_steps{steps}.png");
                crate::report::save_sample_grid_png(&report_dir.join(&png), &samples, 8)?;
                md.push_str(&format!("![{name} {steps}-step]({png})\n"));
                if steps == 1 || Some(&steps) == spec.eval.steps_list.iter().max() {
                    let gif = format!("{name}_steps{steps}.gif");
                    crate::report::save_clip_gif(&report_dir.join(&gif), &samples, 8)?;
                }
            }
        }
    }

    std::fs::write(report_dir.join("summary.md"), md)?;
    Ok(report_dir)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::BaselineMethod;
    use crate::ckpt::param_checksum;
    use crate::config::TeacherConfig;
    use crate::data::BlobConfig;

    fn micro_spec(root: &Path) -> ExperimentSpec {
        let mut spec = ExperimentSpec::default();
        spec.data = BlobConfig {
            n_clips: 12,
            frames: 3,
            channels: 1,
            height: 8,
            width: 8,
            shape_classes: 2,
            n_directions: 4,
            min_speed: 0.0,
            max_speed: 2.0,
            blob_radius: 1.5,
        };
        spec.net = NetConfig {
            channels: 1,
            height: 8,
            width: 8,
            patch: 4,
            d_model: 8,
            n_blocks: 1,
            n_heads: 1,
        };
        spec.teacher = TeacherConfig {
            steps: 3,
            batch_size: 4,
            ..TeacherConfig::default()
        };
        spec.phase1.steps = 2;
        spec.phase1.batch_size = 4;
        spec.phase1.fake_updates = 1;
        spec.phase2.steps = 2;
        spec.phase2.batch_size = 4;
        spec.baselines = vec![crate::baselines::BaselineConfig {
            method: BaselineMethod::Lcm,
            steps: 2,
            batch_size: 4,
            ..crate::baselines::BaselineConfig::default()
        }];
        spec.ablation.lambda_grid = vec![0.0, spec.phase2.lambda_consist];
        spec.ablation.phase1_variants = vec!["none".into(), "lcm".into(), "pose-i".into()];
        spec.ablation.backbones = vec!["ema".into(), "frozen".into()];
        spec.eval.steps_list = vec![1, 4];
        spec.eval.n_projections = 8;
        spec.seeds = vec![1];
        spec.output_root = root.to_path_buf();
        spec
    }

    #[test]
    fn median_basics() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[1.0, 2.0, 3.0, 4.0]), 2.5);
        assert_eq!(median(&[5.0]), 5.0);
    }

    #[test]
    fn manifest_resets_on_hash_change() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = RunManifest::load_or_new(dir.path(), "aaa");
        m.record("teacher", "teacher", 10);
        m.save(dir.path()).unwrap();
        let same = RunManifest::load_or_new(dir.path(), "aaa");
        assert!(same.is_done("teacher"));
        let fresh = RunManifest::load_or_new(dir.path(), "bbb");
        assert!(!fresh.is_done("teacher"));
    }

    #[test]
    fn teacher_training_is_deterministic_and_learns() {
        let dir = tempfile::tempdir().unwrap();
        let spec = micro_spec(dir.path());
        let data = make_moving_blob(&spec.data, 7).unwrap();
        let cfg = TeacherConfig {
            steps: 5,
            batch_size: 4,
            ..TeacherConfig::default()
        };
        let a = train_teacher(&cfg, &spec.net, &data, &dir.path().join("a"), 3).unwrap();
        let b = train_teacher(&cfg, &spec.net, &data, &dir.path().join("b"), 3).unwrap();
        assert_eq!(param_checksum(&a.params), param_checksum(&b.params));
        let c = train_teacher(&cfg, &spec.net, &data, &dir.path().join("c"), 4).unwrap();
        assert_ne!(param_checksum(&a.params), param_checksum(&c.params));
        // zero steps leaves the init untouched and logs nothing
        let zero_cfg = TeacherConfig {
            steps: 0,
            ..cfg.clone()
        };
        let z = train_teacher(&zero_cfg, &spec.net, &data, &dir.path().join("z"), 3).unwrap();
        let mut rng = rng_from_seed(derive_seed(3, "teacher/init"));
        let init = init_velocity_net(&spec.net, &mut rng);
        assert_eq!(param_checksum(&z.params), param_checksum(&init));
        // loss decreases over a slightly longer run
        let longer = TeacherConfig {
            steps: 40,
            lr: 1e-2,
            ..cfg
        };
        train_teacher(&longer, &spec.net, &data, &dir.path().join("l"), 3).unwrap();
        let series = loss_series(&dir.path().join("l").join("teacher_metrics.jsonl"), "loss");
        assert_eq!(series.len(), 40);
        let head: f64 = series[..5].iter().map(|(_, v)| v).sum::<f64>() / 5.0;
        let tail: f64 = series[35..].iter().map(|(_, v)| v).sum::<f64>() / 5.0;
        assert!(tail < head, "loss should fall: head {head} tail {tail}");
    }

    #[test]
    fn pipeline_runs_and_caches() {
        let dir = tempfile::tempdir().unwrap();
        let spec = micro_spec(dir.path());
        let first = run_pipeline(&spec, 1).unwrap();
        assert!(Checkpoint::exists(&first.out_dir.join("teacher")));
        assert!(Checkpoint::exists(&first.out_dir.join("phase1")));
        assert!(Checkpoint::exists(&first.out_dir.join("phase2")));
        assert!(first.baselines.contains_key("lcm"));
        // teacher, pose, pose-phase1, lcm at 2 step counts each
        assert_eq!(first.evals.len(), 8);
        let second = run_pipeline(&spec, 1).unwrap();
        assert_eq!(
            param_checksum(&first.phase2.params),
            param_checksum(&second.phase2.params)
        );
        let manifest = RunManifest::load_or_new(&first.out_dir, &spec.hash());
        assert!(manifest.is_done("teacher"));
        assert!(manifest.is_done("baseline-lcm"));
    }

    #[test]
    fn ablations_and_report_emission() {
        let dir = tempfile::tempdir().unwrap();
        let spec = micro_spec(dir.path());
        let results = run_ablations(&spec).unwrap();
        assert_eq!(results.priming.len(), 3);
        assert_eq!(results.lambda.len(), 2);
        assert_eq!(results.backbone.len(), 2);
        for cell in results.priming.iter().chain(&results.lambda).chain(&results.backbone) {
            assert_eq!(cell.seed_composites.len(), 1);
            assert!(cell.median_composite.is_finite());
        }
        assert!(dir.path().join("ablations/results.json").exists());
        let report_dir = emit_report(&spec).unwrap();
        let summary = std::fs::read_to_string(report_dir.join("summary.md")).unwrap();
        assert!(summary.contains("| model | steps |"));
        assert!(summary.contains("Priming variant"));
        assert!(report_dir.join("main_results.csv").exists());
        assert!(report_dir.join("real.png").exists());
        assert!(report_dir.join("pose_steps1.png").exists());
        assert!(report_dir.join("pose_steps1.gif").exists());
    }

    #[test]
    fn report_without_runs_writes_marker() {
        let dir = tempfile::tempdir().unwrap();
        let spec = micro_spec(dir.path());
        let report_dir = emit_report(&spec).unwrap();
        let summary = std::fs::read_to_string(report_dir.join("summary.md")).unwrap();
        assert!(summary.contains("No completed runs"));
    }
}
