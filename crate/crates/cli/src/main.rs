//! `surfelslam` command-line runner.
//!
//! Exit codes: 0 on success, 1 when a run fails (unreadable dataset, corrupt
//! map, numerical failure), 2 on usage errors (bad flags, unknown format,
//! unreadable or invalid config).

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use surfelslam::config::SlamConfig;
use surfelslam::eval::codec::{write_color, write_depth_preview};
use surfelslam::eval::synthetic::read_intrinsics;
use surfelslam::eval::{
    ate_rmse, generate, load_synthetic, load_tum, read_trajectory, render_quality, save_synthetic, write_trajectory,
    LoadOptions, Metrics, SyntheticScene, Trajectory, TrajectorySpec,
};
use surfelslam::mapfile;
use surfelslam::pipeline::{self, FrontEnd};
use surfelslam::render::{render, RenderConfig};
use surfelslam::{Frame, Intrinsics, Pose, SurfelMap};

#[derive(Parser)]
#[command(name = "surfelslam", version, about = "Dense RGB-D SLAM on 2D Gaussian surfels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Runs SLAM (or one of its parts) on a dataset.
    Run(RunArgs),
    /// Renders a saved map at every pose of a trajectory file.
    RenderViews(RenderViewsArgs),
    /// Writes a synthetic RGB-D sequence.
    Generate(GenerateArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Tum,
    Synthetic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Mode {
    /// Tracking, mapping, back-end and final refinement.
    Full,
    /// Front-end only; no back-end, no map output.
    TrackOnly,
    /// Renders an existing map at the dataset's ground-truth poses.
    RenderOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
enum Ablation {
    DisableDepthAdjust,
    DisableDepthNorm,
    DisableUnbiasedDepth,
    DisableKeyframes,
    DisableLocalMap,
    DisableRandomOpt,
    DisableFinalRefine,
}

impl Ablation {
    fn key(self) -> &'static str {
        match self {
            Ablation::DisableDepthAdjust => "render.depth_adjust",
            Ablation::DisableDepthNorm => "render.depth_normalize",
            Ablation::DisableUnbiasedDepth => "render.unbiased_depth",
            Ablation::DisableKeyframes => "pipeline.keyframes",
            Ablation::DisableLocalMap => "pipeline.local_map",
            Ablation::DisableRandomOpt => "pipeline.random_opt",
            Ablation::DisableFinalRefine => "pipeline.final_refine",
        }
    }
}

#[derive(clap::Args)]
struct RunArgs {
    /// Dataset directory.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_enum, default_value = "synthetic")]
    format: Format,
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "full")]
    mode: Mode,
    /// Switches off one component; repeatable.
    #[arg(long, value_enum)]
    ablate: Vec<Ablation>,
    /// Overrides one configuration key, as `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Map file for `--mode render-only`.
    #[arg(long)]
    map: Option<PathBuf>,
    /// Image downsampling factor for TUM datasets.
    #[arg(long, default_value_t = 1)]
    stride: usize,
    /// Uses every n-th frame.
    #[arg(long, default_value_t = 1)]
    frame_step: usize,
    #[arg(long)]
    max_frames: Option<usize>,
    /// Writes color and depth renders of every keyframe.
    #[arg(long)]
    save_renders: bool,
}

#[derive(clap::Args)]
struct RenderViewsArgs {
    #[arg(long)]
    map: PathBuf,
    /// Trajectory file with `timestamp tx ty tz qx qy qz qw` lines.
    #[arg(long)]
    poses: PathBuf,
    /// File with `fx fy cx cy width height`.
    #[arg(long)]
    intrinsics: PathBuf,
    #[arg(long, default_value = "views")]
    out: PathBuf,
    /// Configuration file; only the render keys are used.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Scene {
    /// Orbit inside a five-plane room.
    RoomOrbit,
    /// Back wall and side wall meeting in a corner.
    TwoPlanes,
    /// Near panel whose edge occludes a far wall.
    Occlusion,
}

#[derive(clap::Args)]
struct GenerateArgs {
    #[arg(long, value_enum, default_value = "room-orbit")]
    scene: Scene,
    #[arg(long, default_value_t = 60)]
    frames: usize,
    #[arg(long, default_value_t = 80)]
    width: usize,
    #[arg(long, default_value_t = 60)]
    height: usize,
    /// Orbit sweep in degrees; defaults to 200° per 60 frames.
    #[arg(long)]
    sweep: Option<f64>,
    /// Scales the camera path of the plane scenes; 0 keeps the camera still.
    #[arg(long, default_value_t = 1.0)]
    motion: f64,
    /// Depth noise standard deviation in metres.
    #[arg(long, default_value_t = 0.0)]
    depth_noise: f64,
    #[arg(long, default_value_t = 0.0)]
    color_noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "synthetic")]
    format: Format,
    #[arg(long)]
    out: PathBuf,
}

/// Errors that map to exit code 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct UsageError(String);

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = configure_threads().and_then(|_| match cli.command {
        Command::Run(args) => run(&args),
        Command::RenderViews(args) => render_views(&args),
        Command::Generate(args) => generate_dataset(&args),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if e.is::<UsageError>() { 2 } else { 1 })
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var("SURFELSLAM_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| usage(format!("SURFELSLAM_THREADS must be a positive integer, got {value:?}")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn load_config(path: Option<&Path>) -> Result<SlamConfig> {
    match path {
        Some(p) => SlamConfig::load(p).map_err(|e| usage(e.to_string())),
        None => Ok(SlamConfig::default()),
    }
}

fn build_config(args: &RunArgs) -> Result<SlamConfig> {
    let mut cfg = load_config(args.config.as_deref())?;
    for o in &args.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects key=value, got {o:?}")))?;
        cfg.set(k.trim(), v.trim()).map_err(|e| usage(e.to_string()))?;
    }
    for a in &args.ablate {
        cfg.set(a.key(), "false").map_err(|e| usage(e.to_string()))?;
    }
    cfg.set("pipeline.seed", &args.seed.to_string()).map_err(|e| usage(e.to_string()))?;
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn load_frames(args: &RunArgs) -> Result<Vec<Frame>> {
    if args.stride == 0 || args.frame_step == 0 {
        return Err(usage("--stride and --frame-step must be at least 1"));
    }
    let mut frames = match args.format {
        Format::Tum => load_tum(
            &args.dataset,
            &LoadOptions {
                stride: args.stride,
                frame_step: args.frame_step,
                max_frames: args.max_frames,
                ..LoadOptions::default()
            },
        )?,
        Format::Synthetic => {
            if args.stride != 1 {
                return Err(usage("--stride only applies to TUM datasets"));
            }
            let mut frames: Vec<Frame> = load_synthetic(&args.dataset)?.into_iter().step_by(args.frame_step).collect();
            if let Some(n) = args.max_frames {
                frames.truncate(n);
            }
            frames
        }
    };
    for (i, f) in frames.iter_mut().enumerate() {
        f.index = i;
    }
    if frames.is_empty() {
        bail!("dataset {} has no frames", args.dataset.display());
    }
    log::info!("loaded {} frames from {}", frames.len(), args.dataset.display());
    Ok(frames)
}

fn ground_truth(frames: &[Frame]) -> Option<Trajectory> {
    let poses: Option<Vec<Pose>> = frames.iter().map(|f| f.gt_pose).collect();
    Trajectory::new(frames.iter().map(|f| f.timestamp).collect(), poses?).ok()
}

fn save_trajectory(path: &Path, traj: &Trajectory) -> Result<()> {
    let mut out = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    write_trajectory(&mut out, traj)?;
    out.flush()?;
    Ok(())
}

fn save_metrics(path: &Path, metrics: &Metrics) -> Result<()> {
    let text = serde_json::to_string_pretty(metrics)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn max_depth(frames: &[Frame]) -> f64 {
    let d = frames
        .iter()
        .flat_map(|f| f.depth.data.iter().copied())
        .filter(|d| d.is_finite())
        .fold(0.0, f64::max);
    if d > 0.0 {
        d
    } else {
        5.0
    }
}

fn save_renders(dir: &Path, map: &SurfelMap, views: &[(usize, Pose, Intrinsics)], cfg: &RenderConfig, max_depth: f64) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (index, pose, intr) in views {
        let out = render(map, pose, intr, cfg);
        write_color(&dir.join(format!("frame_{index:06}_color.png")), &out.color)?;
        write_depth_preview(&dir.join(format!("frame_{index:06}_depth.png")), &out.depth, max_depth)?;
    }
    Ok(())
}

fn run(args: &RunArgs) -> Result<()> {
    let cfg = build_config(args)?;
    if args.mode == Mode::RenderOnly && args.map.is_none() {
        return Err(usage("--mode render-only needs --map"));
    }
    let frames = load_frames(args)?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let truth = ground_truth(&frames);
    let mut metrics = Metrics {
        frames: frames.len(),
        config: cfg.entries(),
        ..Metrics::default()
    };
    let far = max_depth(&frames);

    match args.mode {
        Mode::Full => {
            let state = pipeline::run(frames.iter().cloned(), &cfg)?;
            save_trajectory(&args.out.join("trajectory.txt"), &state.trajectory)?;
            mapfile::save(&args.out.join("map.surf"), &state.map)?;
            let (psnr, l1) = render_quality(&state.map, &state.trajectory.poses, &frames, &cfg.render)?;
            metrics.ate_rmse_m = truth.as_ref().map(|t| ate_rmse(&state.trajectory, t)).transpose()?;
            metrics.psnr_db = Some(psnr);
            metrics.depth_l1_m = l1;
            metrics.keyframes = state.keyframes();
            metrics.submaps = state.submaps.len();
            metrics.surfels_final = state.map.len();
            if args.save_renders {
                let views: Vec<_> = state
                    .records
                    .iter()
                    .zip(&state.trajectory.poses)
                    .filter(|(r, _)| r.keyframe)
                    .map(|(r, p)| (r.index, *p, frames[r.index].intrinsics))
                    .collect();
                save_renders(&args.out.join("renders"), &state.map, &views, &cfg.render, far)?;
            }
        }
        Mode::TrackOnly => {
            let mut front = FrontEnd::new(cfg.clone());
            for f in &frames {
                front.process_frame(f.clone())?;
            }
            let traj = Trajectory::new(frames.iter().map(|f| f.timestamp).collect(), front.poses().to_vec())?;
            save_trajectory(&args.out.join("trajectory.txt"), &traj)?;
            metrics.ate_rmse_m = truth.as_ref().map(|t| ate_rmse(&traj, t)).transpose()?;
            metrics.keyframes = front.records().iter().filter(|r| r.keyframe).count();
            metrics.submaps = front.records().last().map_or(0, |r| r.submap + 1);
            metrics.surfels_final = front.local_len();
        }
        Mode::RenderOnly => {
            let map_path = args.map.as_deref().expect("checked above");
            let map = mapfile::load(map_path).with_context(|| format!("loading map {}", map_path.display()))?;
            let Some(truth) = truth else {
                bail!("render-only mode needs ground-truth poses in the dataset");
            };
            // Maps are anchored at the first frame.
            let origin = truth.poses[0].inverse();
            let poses: Vec<Pose> = truth.poses.iter().map(|p| origin.compose(p)).collect();
            let (psnr, l1) = render_quality(&map, &poses, &frames, &cfg.render)?;
            metrics.psnr_db = Some(psnr);
            metrics.depth_l1_m = l1;
            metrics.surfels_final = map.len();
            if args.save_renders {
                let views: Vec<_> = frames.iter().zip(&poses).map(|(f, p)| (f.index, *p, f.intrinsics)).collect();
                save_renders(&args.out.join("renders"), &map, &views, &cfg.render, far)?;
            }
        }
    }
    save_metrics(&args.out.join("metrics.json"), &metrics)?;
    if let Some(ate) = metrics.ate_rmse_m {
        println!("ate_rmse_m {ate:.6}");
    }
    if let Some(p) = metrics.psnr_db {
        println!("psnr_db {p:.3}");
    }
    if let Some(l1) = metrics.depth_l1_m {
        println!("depth_l1_m {l1:.6}");
    }
    Ok(())
}

fn render_views(args: &RenderViewsArgs) -> Result<()> {
    let cfg = load_config(args.config.as_deref())?;
    let map = mapfile::load(&args.map).with_context(|| format!("loading map {}", args.map.display()))?;
    let intr = read_intrinsics(&args.intrinsics)?;
    let file = File::open(&args.poses).with_context(|| format!("opening {}", args.poses.display()))?;
    let traj = read_trajectory(BufReader::new(file))?;
    fs::create_dir_all(&args.out)?;
    let mut outputs = Vec::with_capacity(traj.len());
    let mut far: f64 = 0.0;
    for pose in &traj.poses {
        let out = render(&map, pose, &intr, &cfg.render);
        far = out.depth.data.iter().copied().fold(far, f64::max);
        outputs.push(out);
    }
    for (i, out) in outputs.iter().enumerate() {
        write_color(&args.out.join(format!("view_{i:06}_color.png")), &out.color)?;
        write_depth_preview(&args.out.join(format!("view_{i:06}_depth.png")), &out.depth, far)?;
    }
    println!("rendered {} views", outputs.len());
    Ok(())
}

fn generate_dataset(args: &GenerateArgs) -> Result<()> {
    if args.frames == 0 || args.width == 0 || args.height == 0 {
        return Err(usage("--frames, --width and --height must be positive"));
    }
    let mut scene = match args.scene {
        Scene::RoomOrbit => {
            let mut s = SyntheticScene::room_orbit(args.frames);
            s.intrinsics = Intrinsics::from_fov(args.width, args.height, 70f64.to_radians());
            if let TrajectorySpec::Orbit { sweep, .. } = &mut s.trajectory {
                *sweep = match args.sweep {
                    Some(deg) => deg.to_radians(),
                    None => *sweep * (args.frames.saturating_sub(1)) as f64 / 59.0,
                };
            }
            s
        }
        Scene::TwoPlanes | Scene::Occlusion => {
            let mut s = if args.scene == Scene::TwoPlanes {
                SyntheticScene::two_planes(args.width, args.height)
            } else {
                SyntheticScene::occluding_planes(args.width, args.height)
            };
            let end = Pose::from_axis_angle(
                nalgebra::Vector3::y(),
                0.05 * args.motion,
                nalgebra::Vector3::new(0.08, 0.02, 0.05) * args.motion,
            );
            s.trajectory = TrajectorySpec::Linear {
                start: Pose::identity(),
                end,
            };
            s
        }
    };
    scene.frames = args.frames;
    scene.depth_noise = args.depth_noise;
    scene.color_noise = args.color_noise;
    scene.seed = args.seed;
    let (frames, _) = generate(&scene)?;
    match args.format {
        Format::Synthetic => save_synthetic(&args.out, &frames)?,
        Format::Tum => surfelslam::eval::tum::save_tum(&args.out, &frames)?,
    }
    println!("wrote {} frames to {}", frames.len(), args.out.display());
    Ok(())
}
