//! `grouplift` command-line tool.

mod plot;
mod run;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use candle_core::DType;
use clap::{Parser, Subcommand};
use grouplift::diffusion::NoiseSchedule;
use grouplift::evaluation::{
    evaluate, in_frame_mask, occlusion_study, single_person_mode, write_occlusion_csv, DiffusionLifter, MetricAccumulator, MetricsReport,
    ModelRunner,
};
use grouplift::model::{load_checkpoint, AttentionScope, CheckpointManifest, Denoiser};
use grouplift::pose::{load_scene, save_scene, Camera, Scene, Skeleton};
use grouplift::synthdata::{make_dataset, DATASET_MANIFEST};
use grouplift::tracking::{ingest_detections, DetectionFile};
use grouplift::training::{finetune, train, TrainConfig, CHECKPOINT_FILE, METRICS_LOG};
use nalgebra::{Matrix3, Vector3};
use serde::Serialize;

use run::{load_dataset, parse_grid, parse_levels, scene_files, Run, RunConfig, SamplerFlags};

#[derive(Debug, Parser)]
#[command(name = "grouplift", version, about = "Multi-person 2D-to-3D pose lifting")]
struct Cli {
    /// JSON run configuration; omitted sections use defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every seeded component (overrides the configuration).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// More log output; repeat for debug.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset of group scenes.
    Generate {
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        split_ratio: Option<f64>,
    },
    /// Train a model on a dataset directory.
    Train {
        #[arg(long)]
        data: PathBuf,
    },
    /// Continue training a checkpoint on another dataset.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Lift 2D scenes to 3D.
    Lift {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Scene file or directory of scene files.
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        sampler: SamplerFlags,
        /// Lift each person on their own.
        #[arg(long)]
        single_person: bool,
    },
    /// Score predictions against ground truth, or a checkpoint on a dataset's test split.
    Eval {
        /// Predicted scene file or directory (with --gt).
        #[arg(long, requires = "gt", conflicts_with_all = ["checkpoint", "data"])]
        pred: Option<PathBuf>,
        /// Ground-truth scene file or directory (with --pred).
        #[arg(long, requires = "pred")]
        gt: Option<PathBuf>,
        #[arg(long, requires = "data")]
        checkpoint: Option<PathBuf>,
        #[arg(long, requires = "checkpoint")]
        data: Option<PathBuf>,
        /// Maximum joints hidden per person in the 2D input.
        #[arg(long)]
        occlusion: Option<usize>,
        #[command(flatten)]
        sampler: SamplerFlags,
        #[arg(long)]
        single_person: bool,
    },
    /// Errors at several occlusion levels, as a table and a plot.
    OcclusionStudy {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Levels such as `0,1,2` or `0..4`.
        #[arg(long)]
        levels: Option<String>,
        #[command(flatten)]
        sampler: SamplerFlags,
        #[arg(long)]
        single_person: bool,
    },
    /// Train and score the component ablation grid.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        /// Extra permutation rows as `SUP:SUB` pairs, e.g. `12:0,6:6,2:10`.
        #[arg(long)]
        grid: Option<String>,
        #[command(flatten)]
        sampler: SamplerFlags,
    },
    /// Render 3D skeletons of a scene to SVG.
    Plot {
        #[arg(long)]
        input: PathBuf,
        /// Frames to render; defaults to the first.
        #[arg(long, value_delimiter = ',')]
        frames: Vec<usize>,
    },
    /// Track per-frame 2D detections into a scene file.
    Track {
        #[arg(long)]
        detections: PathBuf,
        #[arg(long, default_value = "mpi15")]
        skeleton: String,
        /// Image size as WIDTHxHEIGHT.
        #[arg(long, default_value = "1280x720")]
        image_size: String,
        #[arg(long, default_value_t = 30.0)]
        fps: f64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Info,
        1 => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
    match execute(cli) {
        Ok(manifest) => {
            log::info!("wrote {}", manifest.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::FAILURE
        }
    }
}

/// The error chain, skipping causes already spelled out by their parent.
fn describe(e: &anyhow::Error) -> String {
    let mut text = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !text.contains(&msg) {
            if !text.is_empty() {
                text.push_str(": ");
            }
            text.push_str(&msg);
        }
    }
    text
}

fn execute(cli: Cli) -> Result<PathBuf> {
    let mut config = RunConfig::load(cli.config.as_deref())?;
    config.apply_seed(cli.seed);
    let out = cli.out.as_path();
    let seed = cli.seed;
    match cli.command {
        Command::Generate { count, split_ratio } => {
            if let Some(c) = count {
                config.dataset.count = c;
            }
            if let Some(r) = split_ratio {
                config.dataset.split_ratio = r;
            }
            generate(config, seed, out, cli.config.as_deref())
        }
        Command::Train { data } => train_cmd(config, seed, out, &data),
        Command::Finetune { checkpoint, data } => finetune_cmd(config, seed, out, &checkpoint, &data),
        Command::Lift { checkpoint, input, sampler, single_person } => {
            config.apply_sampler(&sampler)?;
            lift_cmd(config, seed, out, &checkpoint, &input, single_person)
        }
        Command::Eval { pred, gt, checkpoint, data, occlusion, sampler, single_person } => {
            config.apply_sampler(&sampler)?;
            if let Some(n) = occlusion {
                config.evaluation.occlusion = n;
            }
            match (pred, gt, checkpoint, data) {
                (Some(pred), Some(gt), None, None) => eval_files(config, seed, out, &pred, &gt),
                (None, None, Some(ckpt), Some(data)) => eval_model(config, seed, out, &ckpt, &data, single_person),
                _ => bail!("eval needs either --pred and --gt, or --checkpoint and --data"),
            }
        }
        Command::OcclusionStudy { checkpoint, data, levels, sampler, single_person } => {
            config.apply_sampler(&sampler)?;
            if let Some(l) = levels {
                config.evaluation.levels = parse_levels(&l)?;
            }
            occlusion_cmd(config, seed, out, &checkpoint, &data, single_person)
        }
        Command::Ablate { data, grid, sampler } => {
            config.apply_sampler(&sampler)?;
            if let Some(g) = grid {
                config.ablation.grid = parse_grid(&g)?;
            }
            ablate_cmd(config, seed, out, &data)
        }
        Command::Plot { input, frames } => plot_cmd(config, seed, out, &input, &frames),
        Command::Track { detections, skeleton, image_size, fps } => track_cmd(config, seed, out, &detections, &skeleton, &image_size, fps),
    }
}

fn generate(config: RunConfig, seed: Option<u64>, out: &Path, config_path: Option<&Path>) -> Result<PathBuf> {
    let mut run = Run::new("generate", config, seed, out)?;
    if let Some(p) = config_path {
        run.input(p);
    }
    let manifest = make_dataset(&run.config.synth, run.config.dataset.count, run.config.dataset.split_ratio, out)?;
    for entry in &manifest.scenes {
        run.output(out.join(&entry.file));
    }
    run.output(out.join(DATASET_MANIFEST));
    log::info!("generated {} scenes", manifest.scenes.len());
    run.finish()
}

fn train_cmd(config: RunConfig, seed: Option<u64>, out: &Path, data: &Path) -> Result<PathBuf> {
    let mut run = Run::new("train", config, seed, out)?;
    run.input(data);
    let ds = load_dataset(data)?;
    let first = ds.train.first().context("dataset has no training scenes")?;
    let mut model_cfg = run.config.model.clone();
    model_cfg.joints = first.joints();
    let outcome = train(&run.config.train, &model_cfg, &ds.train, &ds.test, Some(out))?;
    log_last(&outcome.records);
    run.output(out.join(CHECKPOINT_FILE));
    run.output(out.join(METRICS_LOG));
    run.finish()
}

fn finetune_cmd(config: RunConfig, seed: Option<u64>, out: &Path, checkpoint: &Path, data: &Path) -> Result<PathBuf> {
    let mut run = Run::new("finetune", config, seed, out)?;
    run.input(checkpoint);
    run.input(data);
    let (model, _) = load_checkpoint(checkpoint, DType::F32)?;
    let ds = load_dataset(data)?;
    let outcome = finetune(&model, &run.config.train, &ds.train, &ds.test, Some(out))?;
    log_last(&outcome.records);
    run.output(out.join(CHECKPOINT_FILE));
    run.output(out.join(METRICS_LOG));
    run.finish()
}

fn log_last(records: &[grouplift::training::TrainRecord]) {
    if let Some(r) = records.iter().rev().find(|r| r.split == "train") {
        log::info!("final training loss {:.4} (abs {:.4}, rel {:.4})", r.loss, r.abs, r.rel);
    }
}

/// The training configuration stored in a checkpoint, if any.
fn stored_train_config(manifest: &CheckpointManifest) -> Option<TrainConfig> {
    manifest
        .training
        .get("train_config")
        .and_then(|v| serde_json::from_value(v.clone()).ok())
}

fn load_lifter(checkpoint: &Path, config: &RunConfig) -> Result<DiffusionLifter> {
    let (model, manifest) = load_checkpoint(checkpoint, DType::F32)?;
    let train_cfg = stored_train_config(&manifest).unwrap_or_else(|| config.train.clone());
    let schedule = NoiseSchedule::new(train_cfg.diffusion_steps, train_cfg.schedule)?;
    Ok(DiffusionLifter::new(model, config.sampler.clone(), schedule)?)
}

fn runner(lifter: DiffusionLifter, single_person: bool) -> Box<dyn ModelRunner> {
    if single_person {
        Box::new(single_person_mode(lifter))
    } else {
        Box::new(lifter)
    }
}

fn lift_cmd(config: RunConfig, seed: Option<u64>, out: &Path, checkpoint: &Path, input: &Path, single_person: bool) -> Result<PathBuf> {
    let mut run = Run::new("lift", config, seed, out)?;
    run.input(checkpoint);
    let lifter = runner(load_lifter(checkpoint, &run.config)?, single_person);
    for file in scene_files(input)? {
        run.input(&file);
        let scene = load_scene(&file)?;
        let mut pred = scene.clone();
        pred.pose3d = Some(lifter.lift(&scene)?);
        pred.meta = Some(serde_json::json!({
            "prediction_of": file,
            "checkpoint": checkpoint,
            "source_meta": scene.meta,
        }));
        let stem = file.file_stem().and_then(|s| s.to_str()).unwrap_or("scene");
        let path = out.join(format!("{stem}.pred.json"));
        save_scene(&pred, &path)?;
        load_scene(&path).with_context(|| format!("re-reading {}", path.display()))?;
        run.output(path);
    }
    run.finish()
}

#[derive(Debug, Serialize)]
struct MetricsRow {
    mpjpe_rel_mm: f64,
    mpjpe_abs_mm: f64,
    mpjpe_root_mm: f64,
    count_rel: usize,
    count_abs: usize,
    count_root: usize,
}

fn write_report(run: &mut Run, report: &MetricsReport) -> Result<()> {
    run.write_json("metrics.json", report)?;
    let path = run.path("metrics.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.serialize(MetricsRow {
        mpjpe_rel_mm: report.mpjpe_rel,
        mpjpe_abs_mm: report.mpjpe_abs,
        mpjpe_root_mm: report.mpjpe_root,
        count_rel: report.count_rel,
        count_abs: report.count_abs,
        count_root: report.count_root,
    })?;
    w.flush()?;
    run.output(path);
    log::info!(
        "MPJPE rel {:.1} mm, abs {:.1} mm, root {:.1} mm",
        report.mpjpe_rel,
        report.mpjpe_abs,
        report.mpjpe_root
    );
    Ok(())
}

/// Pairs ground-truth files with predictions named `<stem>.pred.json` or `<stem>.json`.
fn pair_files(pred: &Path, gt: &Path) -> Result<Vec<(PathBuf, PathBuf)>> {
    if !pred.is_dir() && !gt.is_dir() {
        return Ok(vec![(pred.to_path_buf(), gt.to_path_buf())]);
    }
    if !(pred.is_dir() && gt.is_dir()) {
        bail!("--pred and --gt must both be files or both be directories");
    }
    scene_files(gt)?
        .into_iter()
        .map(|g| {
            let stem = g.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            let p = [format!("{stem}.pred.json"), format!("{stem}.json")]
                .into_iter()
                .map(|n| pred.join(n))
                .find(|p| p.exists())
                .with_context(|| format!("no prediction for {}", g.display()))?;
            Ok((p, g))
        })
        .collect()
}

fn eval_files(config: RunConfig, seed: Option<u64>, out: &Path, pred: &Path, gt: &Path) -> Result<PathBuf> {
    let mut run = Run::new("eval", config, seed, out)?;
    let mut acc = MetricAccumulator::default();
    for (p, g) in pair_files(pred, gt)? {
        run.input(&p);
        run.input(&g);
        let (ps, gs) = (load_scene(&p)?, load_scene(&g)?);
        let pred3d = ps.pose3d.with_context(|| format!("{} has no 3D poses", p.display()))?;
        let gt3d = gs.pose3d.as_ref().with_context(|| format!("{} has no 3D ground truth", g.display()))?;
        let mask = in_frame_mask(&gs.pose2d, gs.camera.image_size);
        acc.add(&pred3d, gt3d, &mask, gs.skeleton.root_index)?;
    }
    write_report(&mut run, &acc.report())?;
    run.finish()
}

fn eval_model(config: RunConfig, seed: Option<u64>, out: &Path, checkpoint: &Path, data: &Path, single_person: bool) -> Result<PathBuf> {
    let mut run = Run::new("eval", config, seed, out)?;
    run.input(checkpoint);
    run.input(data);
    let lifter = runner(load_lifter(checkpoint, &run.config)?, single_person);
    let ds = load_dataset(data)?;
    let report = evaluate(&lifter.as_ref(), &ds.test, run.config.evaluation.occlusion, run.config.sampler.seed)?;
    write_report(&mut run, &report)?;
    run.finish()
}

fn occlusion_cmd(config: RunConfig, seed: Option<u64>, out: &Path, checkpoint: &Path, data: &Path, single_person: bool) -> Result<PathBuf> {
    let mut run = Run::new("occlusion-study", config, seed, out)?;
    run.input(checkpoint);
    run.input(data);
    let lifter = runner(load_lifter(checkpoint, &run.config)?, single_person);
    let ds = load_dataset(data)?;
    let rows = occlusion_study(&lifter.as_ref(), &ds.test, &run.config.evaluation.levels, run.config.sampler.seed)?;
    for r in &rows {
        log::info!("n={}: rel {:.1} mm, abs {:.1} mm", r.n, r.mpjpe_rel_mm, r.mpjpe_abs_mm);
    }
    let csv_path = run.path("occlusion.csv");
    write_occlusion_csv(&rows, &csv_path)?;
    run.output(csv_path);
    run.write_json("occlusion.json", &rows)?;
    let svg = run.path("occlusion.svg");
    plot::occlusion_curve(&rows, &svg)?;
    run.output(svg);
    run.finish()
}

#[derive(Debug, Clone, Serialize)]
struct AblationRow {
    name: String,
    multi: bool,
    person_encoding: bool,
    n_sup: usize,
    n_sub: usize,
    mpjpe_rel_mm: f64,
    mpjpe_abs_mm: f64,
    mpjpe_root_mm: f64,
}

fn ablate_cmd(config: RunConfig, seed: Option<u64>, out: &Path, data: &Path) -> Result<PathBuf> {
    let mut run = Run::new("ablate", config, seed, out)?;
    run.input(data);
    let ds = load_dataset(data)?;
    let first = ds.train.first().context("dataset has no training scenes")?;
    let (n_sup, n_sub) = (run.config.train.n_sup, run.config.train.n_sub);
    // rows add one component at a time, then the permutation grid
    let mut plan: Vec<(String, bool, bool, usize, usize)> = vec![
        ("single".into(), false, false, 0, 0),
        ("multi".into(), true, false, 0, 0),
        ("multi+pe".into(), true, true, 0, 0),
        ("multi+pe+sup".into(), true, true, n_sup, 0),
        ("multi+pe+sup+sub".into(), true, true, n_sup, n_sub),
    ];
    for &(a, b) in &run.config.ablation.grid {
        plan.push((format!("perm-{a}-{b}"), true, true, a, b));
    }
    let mut rows = Vec::new();
    for (name, multi, pe, sup, sub) in plan {
        let mut model_cfg = run.config.model.clone();
        model_cfg.joints = first.joints();
        model_cfg.person_encoding = pe;
        model_cfg.attention_scope = if multi { AttentionScope::Group } else { AttentionScope::PerPerson };
        let mut train_cfg = run.config.train.clone();
        train_cfg.n_sup = sup;
        train_cfg.n_sub = sub;
        let dir = out.join(&name);
        log::info!("training `{name}`");
        let model: Denoiser = train(&train_cfg, &model_cfg, &ds.train, &[], Some(&dir))?.model;
        run.output(dir.join(CHECKPOINT_FILE));
        let schedule = NoiseSchedule::new(train_cfg.diffusion_steps, train_cfg.schedule)?;
        let lifter = runner(DiffusionLifter::new(model, run.config.sampler.clone(), schedule)?, !multi);
        let r = evaluate(&lifter.as_ref(), &ds.test, run.config.evaluation.occlusion, run.config.sampler.seed)?;
        log::info!("`{name}`: rel {:.1} mm, abs {:.1} mm", r.mpjpe_rel, r.mpjpe_abs);
        rows.push(AblationRow {
            name,
            multi,
            person_encoding: pe,
            n_sup: sup,
            n_sub: sub,
            mpjpe_rel_mm: r.mpjpe_rel,
            mpjpe_abs_mm: r.mpjpe_abs,
            mpjpe_root_mm: r.mpjpe_root,
        });
    }
    let path = run.path("ablation.csv");
    let mut w = csv::Writer::from_path(&path)?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    run.output(path);
    run.write_json("ablation.json", &rows)?;
    run.finish()
}

fn plot_cmd(config: RunConfig, seed: Option<u64>, out: &Path, input: &Path, frames: &[usize]) -> Result<PathBuf> {
    let mut run = Run::new("plot", config, seed, out)?;
    run.input(input);
    let scene = load_scene(input)?;
    let pose = scene.pose3d.as_ref().with_context(|| format!("{} has no 3D poses", input.display()))?;
    let frames = if frames.is_empty() { vec![0] } else { frames.to_vec() };
    let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("scene");
    for f in frames {
        let path = run.path(&format!("{stem}_frame{f:04}.svg"));
        plot::skeleton_frame(&scene, pose, f, &path)?;
        run.output(path);
    }
    run.finish()
}

fn parse_size(text: &str) -> Result<(u32, u32)> {
    let (w, h) = text.split_once('x').with_context(|| format!("image size `{text}` is not WIDTHxHEIGHT"))?;
    let size = (w.trim().parse()?, h.trim().parse()?);
    if size.0 == 0 || size.1 == 0 {
        bail!("image size must be positive");
    }
    Ok(size)
}

fn track_cmd(config: RunConfig, seed: Option<u64>, out: &Path, detections: &Path, skeleton: &str, image_size: &str, fps: f64) -> Result<PathBuf> {
    let mut run = Run::new("track", config, seed, out)?;
    run.input(detections);
    let size = parse_size(image_size)?;
    let skeleton = Skeleton::by_name(skeleton)?;
    let file = DetectionFile::load(detections)?;
    let pose2d = ingest_detections(&file, &skeleton, size, &run.config.tracker)?;
    let persons = pose2d.dim().1;
    // detections carry no calibration; a centered pinhole stands in
    let f = size.0.max(size.1) as f64;
    let k = Matrix3::new(f, 0.0, size.0 as f64 / 2.0, 0.0, f, size.1 as f64 / 2.0, 0.0, 0.0, 1.0);
    let scene = Scene {
        skeleton,
        pose2d,
        pose3d: None,
        camera: Camera::new(k, Matrix3::identity(), Vector3::zeros(), size)?,
        fps,
        person_ids: (0..persons).map(|i| format!("track-{i}")).collect(),
        meta: Some(serde_json::json!({ "detections": detections, "camera": "placeholder" })),
    };
    let path = run.path("tracked.json");
    save_scene(&scene, &path)?;
    log::info!("{persons} tracks retained");
    run.output(path);
    run.finish()
}
