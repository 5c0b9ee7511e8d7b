use std::ffi::OsString;
use std::path::{Path, PathBuf};

use camtraj_core::eval::evaluate;
use camtraj_core::geometry::trajectory_from_relative;
use camtraj_core::predictor::{focal_corpus, train, Model};
use camtraj_core::refine::{build_tracks, normalize_sigma, refine_trajectory, WindowReport};
use camtraj_core::solver::{fit_sequence, FitResult, FrameObservations};
use camtraj_core::synth::{generate_scene, perturb, random_rotation_path, CameraPath, NoiseSpec, SceneSpec};
use clap::{Args, Parser, Subcommand};
use nalgebra::{Vector2, Vector3};
use rand::SeedableRng;
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::dataset::{self, file_name};
use crate::error::{missing, CliError, CliResult};
use crate::raster::Raster;
use crate::trajectory::TrajectoryFile;
use crate::{checkpoint, fsutil, plot};

#[derive(Debug, Parser)]
#[command(name = "camtraj", version, about = "Camera trajectory and focal length estimation from depth and optical flow")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Overrides the `seed` key of the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Flat key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    /// Also write PNG trajectory plots.
    #[arg(long)]
    plots: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit poses and uncertainty for every focal candidate by direct optimization.
    Fit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
    },
    /// Predict poses, uncertainty and focal likelihoods with a trained model.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Bundle-adjust an existing trajectory.
    Refine {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        trajectory: PathBuf,
        /// Directory with sigma_%06d.acrs rasters; defaults to the
        /// trajectory's directory. Without rasters all tracks are trusted.
        #[arg(long)]
        uncertainty_dir: Option<PathBuf>,
    },
    /// Compare a trajectory against ground truth.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        estimate: PathBuf,
        #[arg(long)]
        ground_truth: PathBuf,
    },
    /// Write a synthetic sequence with ground truth.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Train the toy predictor on a synthetic corpus.
    Train {
        #[command(flatten)]
        common: Common,
    },
}

/// Parse arguments, run the subcommand and return the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind as K;
            if matches!(e.kind(), K::DisplayHelp | K::DisplayVersion | K::DisplayHelpOnMissingArgumentOrSubcommand) {
                print!("{e}");
                return if e.kind() == K::DisplayHelpOnMissingArgumentOrSubcommand { 1 } else { 0 };
            }
            let first = e.to_string().lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ").to_string();
            eprintln!("{}", CliError::input(first).line());
            return 1;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.line());
            e.exit_code()
        }
    }
}

fn configure_threads() -> CliResult<()> {
    if let Ok(v) = std::env::var("ANYCAM_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|n| *n > 0)
            .ok_or_else(|| CliError::input(format!("ANYCAM_THREADS must be a positive integer, got {v:?}")))?;
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn load_config(common: &Common) -> CliResult<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::read(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

struct Output {
    dir: PathBuf,
    files: Vec<String>,
}

impl Output {
    fn new(common: &Common, cfg: &RunConfig) -> CliResult<Self> {
        let dir = common.out_dir.clone();
        std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        let mut out = Self { dir, files: Vec::new() };
        out.write("config.txt", cfg.to_text().as_bytes())?;
        Ok(out)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> CliResult<()> {
        fsutil::atomic_write(&self.path(name), bytes)?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn record(&mut self, names: impl IntoIterator<Item = String>) {
        self.files.extend(names);
    }

    fn trajectory(&mut self, name: &str, t: &TrajectoryFile) -> CliResult<()> {
        self.write(name, t.to_text().as_bytes())
    }

    fn plot(&mut self, name: &str, est: &[camtraj_core::PoseSE3], reference: Option<&[camtraj_core::PoseSE3]>) -> CliResult<()> {
        plot::write(&self.path(name), est, reference)?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn finish(mut self, command: &str, seed: u64, mut body: Value) -> CliResult<()> {
        self.files.push("manifest.json".into());
        self.files.sort();
        body["command"] = json!(command);
        body["seed"] = json!(seed);
        body["files"] = json!(self.files);
        let text = serde_json::to_string_pretty(&body).map_err(|e| CliError::numerical(format!("manifest: {e}")))?;
        fsutil::atomic_write(&self.path("manifest.json"), format!("{text}\n").as_bytes())
    }
}

fn execute(command: Command) -> CliResult<()> {
    configure_threads()?;
    match command {
        Command::Fit { common, input } => cmd_fit(&common, &input),
        Command::Predict {
            common,
            input,
            checkpoint,
        } => cmd_predict(&common, &input, &checkpoint),
        Command::Refine {
            common,
            input,
            trajectory,
            uncertainty_dir,
        } => cmd_refine(&common, &input, &trajectory, uncertainty_dir.as_deref()),
        Command::Eval {
            common,
            estimate,
            ground_truth,
        } => cmd_eval(&common, &estimate, &ground_truth),
        Command::Synth { common } => cmd_synth(&common),
        Command::Train { common } => cmd_train(&common),
    }
}

fn bank_outputs(out: &mut Output, result: &FitResult, schedule: Vec<f64>, plots: bool) -> CliResult<Value> {
    let best = result.best_candidate();
    let poses = trajectory_from_relative(&best.poses);
    out.trajectory(
        "trajectory.txt",
        &TrajectoryFile::new(poses.clone(), Some(best.focal)).with_schedule(schedule),
    )?;
    let names = dataset::write_sigmas(&out.dir, &best.sigmas)?;
    out.record(names);
    if plots {
        out.plot("trajectory.png", &poses, None)?;
    }
    let c = &result.candidates;
    Ok(json!({
        "frames": poses.len(),
        "selected_index": result.best,
        "selected_focal": best.focal,
        "focals": c.iter().map(|c| c.focal).collect::<Vec<_>>(),
        "flow_losses": c.iter().map(|c| c.flow_loss).collect::<Vec<_>>(),
        "backward_flow_losses": c.iter().map(|c| c.backward_flow_loss).collect::<Vec<_>>(),
        "consistency_losses": c.iter().map(|c| c.consistency_loss).collect::<Vec<_>>(),
        "likelihoods": result.likelihood.as_slice(),
    }))
}

fn cmd_fit(common: &Common, input: &Path) -> CliResult<()> {
    let cfg = load_config(common)?;
    let frames = dataset::load_sequence(input)?;
    let schedule = cfg.schedule(frames[0].depth.height())?;
    let result = fit_sequence(&frames, &schedule, &cfg.fit_config())?;
    let mut out = Output::new(common, &cfg)?;
    let body = bank_outputs(&mut out, &result, schedule.candidates.clone(), common.plots)?;
    out.finish("fit", cfg.seed, body)
}

fn cmd_predict(common: &Common, input: &Path, ckpt: &Path) -> CliResult<()> {
    let cfg = load_config(common)?;
    if !ckpt.is_file() {
        return Err(missing(ckpt.to_path_buf()));
    }
    let model = checkpoint::read(ckpt)?;
    let frames = dataset::load_sequence(input)?;
    let result = model.forward(&frames).map_err(|e| CliError::from(e).at(input))?;
    let schedule = model.config.schedule()?;
    let mut out = Output::new(common, &cfg)?;
    let body = bank_outputs(&mut out, &result, schedule.candidates, common.plots)?;
    out.finish("predict", cfg.seed, body)
}

fn window_json(w: &WindowReport) -> Value {
    json!({
        "start": w.start,
        "end": w.end,
        "initial_cost": w.initial_cost,
        "final_cost": w.final_cost,
        "aborted": w.aborted,
    })
}

fn cmd_refine(common: &Common, input: &Path, traj: &Path, sigma_dir: Option<&Path>) -> CliResult<()> {
    let cfg = load_config(common)?;
    if !traj.is_file() {
        return Err(missing(traj.to_path_buf()));
    }
    let init = TrajectoryFile::read(traj)?;
    let frames = dataset::load_sequence(input)?;
    if init.poses.len() != frames.len() {
        return Err(CliError::input(format!(
            "{}: {} poses for a sequence of {} frames",
            traj.display(),
            init.poses.len(),
            frames.len()
        )));
    }
    let focal = init
        .focal
        .ok_or_else(|| CliError::input(format!("{}: no '# focal:' header", traj.display())))?;
    let pairs = frames.len() - 1;
    let default_dir = traj.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
    let sigma_dir = sigma_dir.map(Path::to_path_buf).unwrap_or(default_dir);
    let (w, h) = frames[0].dims();
    let sigmas: Vec<Vec<f64>> = match dataset::load_sigmas(&sigma_dir, pairs)? {
        Some(maps) => {
            if maps.iter().any(|m| (m.width(), m.height()) != (w, h)) {
                return Err(CliError::input(format!(
                    "{}: uncertainty rasters do not match the {w}x{h} sequence",
                    sigma_dir.display()
                )));
            }
            maps.iter().map(normalize_sigma).collect()
        }
        None => vec![vec![0.0; w * h]; pairs],
    };
    let flows: Vec<_> = frames[..pairs].iter().map(|f| f.flow_fwd.clone().expect("loaded")).collect();
    let depths: Vec<_> = frames.iter().map(|f| f.depth.clone()).collect();
    let tracks = build_tracks(&flows, &sigmas, &depths, &cfg.refine)?;
    let refined = refine_trajectory(&init.poses, focal, &tracks, &cfg.refine)?;
    let mut out = Output::new(common, &cfg)?;
    let before = TrajectoryFile {
        schedule: init.schedule.clone(),
        ..TrajectoryFile::new(init.poses.clone(), Some(focal))
    };
    out.trajectory("trajectory_initial.txt", &before)?;
    let after = TrajectoryFile {
        schedule: init.schedule.clone(),
        ..TrajectoryFile::new(refined.poses.clone(), Some(refined.focal))
    };
    out.trajectory("trajectory_refined.txt", &after)?;
    if common.plots {
        out.plot("trajectory_refined.png", &refined.poses, Some(&init.poses))?;
    }
    let body = json!({
        "frames": refined.poses.len(),
        "tracks": tracks.tracks.len(),
        "initial_focal": focal,
        "selected_focal": refined.focal,
        "windows": refined.windows.iter().map(window_json).collect::<Vec<_>>(),
        "global": refined.global.as_ref().map(window_json),
    });
    out.finish("refine", cfg.seed, body)
}

fn cmd_eval(common: &Common, est_path: &Path, gt_path: &Path) -> CliResult<()> {
    let cfg = load_config(common)?;
    for p in [est_path, gt_path] {
        if !p.is_file() {
            return Err(missing(p.to_path_buf()));
        }
    }
    let est = TrajectoryFile::read(est_path)?;
    let gt = TrajectoryFile::read(gt_path)?;
    if est.indices != gt.indices {
        return Err(CliError::input(format!(
            "{} and {} cover different frame indices",
            est_path.display(),
            gt_path.display()
        )));
    }
    let focal = |t: &TrajectoryFile, p: &Path| {
        t.focal
            .ok_or_else(|| CliError::input(format!("{}: no '# focal:' header", p.display())))
    };
    let report = evaluate(
        &est.poses,
        &gt.poses,
        focal(&est, est_path)?,
        focal(&gt, gt_path)?,
        cfg.alignment,
        cfg.rpe_delta,
    )?;
    let mut out = Output::new(common, &cfg)?;
    out.write("metrics.txt", report.to_key_value().as_bytes())?;
    let metrics = serde_json::to_value(&report).map_err(|e| CliError::numerical(format!("metrics: {e}")))?;
    out.write(
        "metrics.json",
        format!("{}\n", serde_json::to_string_pretty(&metrics).expect("value serializes")).as_bytes(),
    )?;
    if common.plots {
        let (aligned, _) = camtraj_core::eval::align(&est.poses, &gt.poses, cfg.alignment)?;
        out.plot("trajectory_aligned.png", &aligned, Some(&gt.poses))?;
    }
    out.finish("eval", cfg.seed, json!({ "metrics": metrics, "rpe_delta": cfg.rpe_delta }))
}

fn synth_spec(cfg: &RunConfig) -> CliResult<SceneSpec> {
    let s = &cfg.synth;
    let path = match s.path.as_str() {
        "arc" => CameraPath::Arc {
            radius: s.path_radius,
            angle_per_frame: s.path_deg.to_radians(),
        },
        "rotation" => {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
            random_rotation_path(&mut rng, s.path_deg, s.path_trans)
        }
        "straight" => CameraPath::Straight {
            velocity: Vector3::new(s.path_trans, 0.0, 0.0),
        },
        _ => CameraPath::Identity,
    };
    let mut spec = SceneSpec::random_static(s.width, s.height, s.focal, s.frames, path, s.boxes, cfg.seed);
    if s.mover_coverage > 0.0 {
        spec = spec.with_mover(
            s.mover_coverage,
            Vector2::zeros(),
            s.mover_depth,
            Vector3::new(s.mover_velocity, 0.3 * s.mover_velocity, 0.0),
        )?;
    }
    Ok(spec)
}

fn cmd_synth(common: &Common) -> CliResult<()> {
    let cfg = load_config(common)?;
    let spec = synth_spec(&cfg)?;
    let seq = generate_scene(&spec)?;
    let noisy = perturb(
        &seq,
        &NoiseSpec {
            flow_sigma: cfg.synth.flow_noise,
            depth_rel_sigma: cfg.synth.depth_noise,
            seed: cfg.seed,
        },
    )?;
    let mut out = Output::new(common, &cfg)?;
    let frames: Vec<FrameObservations> = (&noisy).into();
    let names = dataset::write_sequence(&out.dir, &frames)?;
    out.record(names);
    for (i, m) in seq.motion_masks.iter().enumerate() {
        let p = dataset::mask_path(&out.dir, i);
        Raster::from_mask(m).write(&p)?;
        out.record([file_name(&p)]);
    }
    out.trajectory(
        "gt_trajectory.txt",
        &TrajectoryFile::new(seq.gt_absolute_poses.clone(), Some(spec.focal)),
    )?;
    let scene = serde_json::to_string_pretty(&spec).map_err(|e| CliError::numerical(format!("scene: {e}")))?;
    out.write("scene.json", format!("{scene}\n").as_bytes())?;
    if common.plots {
        out.plot("gt_trajectory.png", &seq.gt_absolute_poses, None)?;
    }
    let mover_pixels: usize = seq.motion_masks.iter().map(|m| m.data.iter().filter(|b| **b).count()).sum();
    out.finish(
        "synth",
        cfg.seed,
        json!({
            "frames": seq.frames(),
            "width": spec.width,
            "height": spec.height,
            "focal": spec.focal,
            "mover_pixels": mover_pixels,
        }),
    )
}

fn cmd_train(common: &Common) -> CliResult<()> {
    let cfg = load_config(common)?;
    let corpus = focal_corpus(&cfg.model, &cfg.corpus, cfg.seed)?;
    let frames: Vec<Vec<FrameObservations>> = corpus.into_iter().map(|s| s.frames).collect();
    let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
    let log = train(&mut model, &frames, &cfg.train_config())?;
    let mut out = Output::new(common, &cfg)?;
    checkpoint::write(&out.path("model.ckpt"), &model)?;
    out.record(["model.ckpt".to_string()]);
    let mut text = String::from("# step loss intrinsics_kl length\n");
    for (i, ((l, k), n)) in log.losses.iter().zip(&log.intrinsics_kl).zip(&log.lengths).enumerate() {
        text.push_str(&format!("{i} {l:.9e} {k:.9e} {n}\n"));
    }
    out.write("loss_log.txt", text.as_bytes())?;
    out.finish(
        "train",
        cfg.seed,
        json!({
            "steps": log.losses.len(),
            "corpus_size": frames.len(),
            "initial_loss": log.losses.first(),
            "final_loss": log.losses.last(),
            "parameters": model.params.len(),
        }),
    )
}
