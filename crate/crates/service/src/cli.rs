//! `rover` subcommands. Every workflow runs headless; parameters come from
//! an optional JSON config file, with flags taking precedence.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use rover_core::eval::{RecordKind, SessionLog, DEFAULT_BAND};
use rover_core::io::{read_gray, write_depth_pfm, write_disparity_pfm, write_png};
use rover_core::pipeline::{trace_schedule, Channel, OverlapPolicy};
use rover_core::raster::DepthMap;
use rover_core::rover::RoverState;
use rover_core::scene::{render_stereo, SceneDescription};
use rover_core::sim::{courses, Simulation};
use rover_core::stereo::match_stereo;

use crate::config::{load_plan, AppConfig};
use crate::{server, CliError};

#[derive(Debug, Parser)]
#[command(
    name = "rover",
    version,
    about = "Synthetic depth-aware rover: rendering, stereo, simulation and teleoperation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a stereo pair and ground-truth depth from the rover's camera.
    Render(RenderArgs),
    /// Match a rectified stereo pair into a disparity PFM.
    Match(MatchArgs),
    /// Run a plan headlessly and write a session log and report.
    Simulate(SimulateArgs),
    /// Compute metrics from a recorded session directory.
    Eval(EvalArgs),
    /// Serve the teleoperation WebSocket at /ws.
    Serve(ServeArgs),
    /// Print the scheduler trace for a schedule and duration as JSONL.
    Trace(TraceArgs),
    /// Print the wire protocol JSON schema.
    Schema,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    /// JSON config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Rover pose as `x,y,heading_rad`; defaults to `rover.start`.
    #[arg(long, value_parser = parse_pose, allow_hyphen_values = true)]
    pub pose: Option<[f64; 3]>,
    /// Overrides `scene.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct MatchArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub left: PathBuf,
    #[arg(long)]
    pub right: PathBuf,
    /// Disparity PFM; invalid pixels are +inf.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write depth `Z = f B / d` in baseline units.
    #[arg(long)]
    pub depth_out: Option<PathBuf>,
    /// Focal length for `--depth-out`; defaults to the configured rig.
    #[arg(long)]
    pub focal_px: Option<f64>,
    /// Baseline for `--depth-out`; defaults to the configured rig.
    #[arg(long)]
    pub baseline: Option<f64>,
    #[arg(long)]
    pub num_disparities: Option<usize>,
    /// Census window as `WxH`, both odd.
    #[arg(long, value_parser = parse_window)]
    pub census_window: Option<(usize, usize)>,
    #[arg(long)]
    pub p1: Option<u16>,
    #[arg(long)]
    pub p2: Option<u16>,
    /// Aggregation directions, 4 or 8.
    #[arg(long)]
    pub paths: Option<usize>,
    #[arg(long)]
    pub uniqueness_ratio: Option<u32>,
    #[arg(long)]
    pub lr_max_diff: Option<f32>,
    #[arg(long)]
    pub speckle_window: Option<usize>,
    #[arg(long)]
    pub speckle_range: Option<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CourseKind {
    Blocked,
    Clear,
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("source").required(true).args(["plan", "course"]))]
pub struct SimulateArgs {
    #[arg(long, conflicts_with = "course")]
    pub config: Option<PathBuf>,
    /// Path plan JSON: `{"name", "steps": [{"duration_s", "left", "right"}]}`.
    #[arg(long)]
    pub plan: Option<PathBuf>,
    /// Generated course with its own scene, start pose and plan.
    #[arg(long, value_enum)]
    pub course: Option<CourseKind>,
    /// Course seed.
    #[arg(long, default_value_t = 0, requires = "course")]
    pub seed: u64,
    /// Root directory for session logs.
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
    #[arg(long, default_value = "run")]
    pub run_id: String,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Session directory written by `simulate`.
    #[arg(long)]
    pub run: PathBuf,
    /// Metrics JSON path; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_BAND.0)]
    pub band_min: f64,
    #[arg(long, default_value_t = DEFAULT_BAND.1)]
    pub band_max: f64,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides `server.listen`, e.g. `0.0.0.0:8765`.
    #[arg(long)]
    pub listen: Option<String>,
    #[arg(long)]
    pub frame_rate_limit: Option<f64>,
    /// Directory of named `<name>.json` plans.
    #[arg(long)]
    pub paths_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Policy {
    Drop,
    QueueOne,
}

#[derive(Debug, Args)]
pub struct TraceArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seconds of simulated time.
    #[arg(long, default_value_t = 30.0)]
    pub duration: f64,
    #[arg(long)]
    pub detection_rate: Option<f64>,
    #[arg(long)]
    pub depth_rate: Option<f64>,
    #[arg(long)]
    pub depth_latency: Option<f64>,
    #[arg(long, value_enum)]
    pub policy: Option<Policy>,
    /// JSONL path; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_pose(s: &str) -> Result<[f64; 3], String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match v.as_slice() {
        [x, y, h] if v.iter().all(|f| f.is_finite()) => Ok([*x, *y, *h]),
        _ => Err("expected three finite numbers x,y,heading".into()),
    }
}

fn parse_window(s: &str) -> Result<(usize, usize), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or("expected WxH")?;
    let w = w.parse().map_err(|e| format!("{w:?}: {e}"))?;
    let h = h.parse().map_err(|e| format!("{h:?}: {e}"))?;
    Ok((w, h))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

fn write_text(path: Option<&Path>, text: &str) -> Result<(), CliError> {
    match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(io_err(dir))?;
            }
            fs::write(p, text).map_err(io_err(p))
        }
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| CliError::Io(format!("stdout: {e}"))),
    }
}

fn pretty(v: &serde_json::Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("JSON values serialize");
    s.push('\n');
    s
}

fn render(args: RenderArgs) -> Result<(), CliError> {
    let mut cfg = AppConfig::load_or_default(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.sim.scene.seed = seed;
    }
    if let Some(p) = args.pose {
        cfg.sim.rover.start = p;
    }
    cfg.validate()?;
    let sim = &cfg.sim;
    let scene = SceneDescription::from_spec(&sim.scene).map_err(CliError::validation)?;
    let rig = sim.rig.rig().map_err(CliError::validation)?;
    let state = RoverState::at(sim.rover.start[0], sim.rover.start[1], sim.rover.start[2]);
    let pose = sim.rig.pose(&scene, &state);
    let frame = render_stereo(&scene, &rig, &pose).map_err(CliError::validation)?;
    fs::create_dir_all(&args.out).map_err(io_err(&args.out))?;
    write_png(&args.out.join("left.png"), &frame.left)?;
    write_png(&args.out.join("right.png"), &frame.right)?;
    let gt_m = frame.gt_depth_left.scaled(1.0 / sim.rig.units_per_meter);
    write_depth_pfm(&args.out.join("depth_gt.pfm"), &gt_m)?;
    let meta = json!({
        "width": rig.intrinsics().width(),
        "height": rig.intrinsics().height(),
        "focal_px": rig.focal_px(),
        "baseline": rig.baseline(),
        "units_per_meter": sim.rig.units_per_meter,
        "rover": state,
        "camera": {"position": pose.position, "yaw": pose.yaw, "pitch": pose.pitch},
        "depth_units": "meters",
    });
    write_text(Some(&args.out.join("meta.json")), &pretty(&meta))
}

fn match_pair(args: MatchArgs) -> Result<(), CliError> {
    let cfg = AppConfig::load_or_default(args.config.as_deref())?;
    let mut p = cfg.sim.sgm;
    if let Some(v) = args.num_disparities {
        p.num_disparities = v;
    }
    if let Some(v) = args.census_window {
        p.census_window = v;
    }
    if let Some(v) = args.p1 {
        p.p1 = v;
    }
    if let Some(v) = args.p2 {
        p.p2 = v;
    }
    if let Some(v) = args.paths {
        p.num_paths = v;
    }
    if let Some(v) = args.uniqueness_ratio {
        p.uniqueness_ratio = v;
    }
    if let Some(v) = args.lr_max_diff {
        p.lr_max_diff = v;
    }
    if let Some(v) = args.speckle_window {
        p.speckle_window = v;
    }
    if let Some(v) = args.speckle_range {
        p.speckle_range = v;
    }
    let left = read_gray(&args.left)?;
    let right = read_gray(&args.right)?;
    let disp = match_stereo(&left, &right, &p).map_err(CliError::validation)?;
    write_disparity_pfm(&args.out, &disp)?;
    if let Some(depth_out) = &args.depth_out {
        let (f, b) = match (args.focal_px, args.baseline) {
            (Some(f), Some(b)) => (f, b),
            (f, b) => {
                let rig = cfg.sim.rig.rig().map_err(CliError::validation)?;
                (f.unwrap_or(rig.focal_px()), b.unwrap_or(rig.baseline()))
            }
        };
        if !(f > 0.0 && b > 0.0 && f.is_finite() && b.is_finite()) {
            return Err(CliError::Validation(
                "focal length and baseline must be positive".into(),
            ));
        }
        let depth = DepthMap::new(disp.values().map(|&d| {
            if d.is_finite() && d > 0.0 {
                (f * b / d as f64) as f32
            } else {
                DepthMap::INVALID
            }
        }));
        write_depth_pfm(depth_out, &depth)?;
    }
    let valid = disp.valid_count() as f64 / (disp.width() * disp.height()).max(1) as f64;
    eprintln!(
        "{}x{} disparity, {:.1}% valid",
        disp.width(),
        disp.height(),
        100.0 * valid
    );
    Ok(())
}

fn simulate(args: SimulateArgs) -> Result<(), CliError> {
    let (sim, plan) = match args.course {
        Some(kind) => {
            let c = match kind {
                CourseKind::Blocked => courses::blocked(args.seed),
                CourseKind::Clear => courses::clear(args.seed),
            };
            (Simulation::with_scene(c.config, c.scene)?, c.plan)
        }
        None => {
            let cfg = AppConfig::load_or_default(args.config.as_deref())?;
            cfg.validate()?;
            let path = args.plan.as_deref().expect("clap requires plan or course");
            (Simulation::new(cfg.sim)?, load_plan(path)?)
        }
    };
    let out = sim.run(&plan, Some((&args.out, &args.run_id)))?;
    let run_dir = out.run_dir.clone().expect("logging was requested");
    let report = json!({
        "run_id": args.run_id,
        "run_dir": run_dir,
        "plan": plan.name,
        "completed": out.report.completed,
        "elapsed_s": out.report.elapsed,
        "halt_events": out.report.halt_events,
        "nav": out.nav,
    });
    let text = pretty(&report);
    write_text(Some(&run_dir.join("report.json")), &text)?;
    write_text(
        Some(&run_dir.join("trajectory.jsonl")),
        &out.report.trajectory_jsonl(),
    )?;
    write_text(None, &text)
}

fn eval(args: EvalArgs) -> Result<(), CliError> {
    if !args.run.is_dir() {
        return Err(CliError::Io(format!(
            "{}: not a directory",
            args.run.display()
        )));
    }
    let log = SessionLog::load(&args.run)?;
    let band = (args.band_min, args.band_max);
    let depth = log.replay_depth(band)?;
    let nav = log.replay_nav()?;
    let mut counts = serde_json::Map::new();
    for kind in [
        RecordKind::Rgb,
        RecordKind::Depth,
        RecordKind::Detections,
        RecordKind::Telemetry,
        RecordKind::Pose,
    ] {
        counts.insert(kind.to_string(), log.of_kind(kind).count().into());
    }
    let detections: usize = log
        .of_kind(RecordKind::Detections)
        .map(|e| e.data["detections"].as_array().map_or(0, |a| a.len()))
        .sum();
    let metrics = json!({
        "run_id": log.index.run_id,
        "depth": depth,
        "nav": nav,
        "records": counts,
        "detections_total": detections,
    });
    write_text(args.out.as_deref(), &pretty(&metrics))
}

fn trace(args: TraceArgs) -> Result<(), CliError> {
    let cfg = AppConfig::load_or_default(args.config.as_deref())?;
    let mut s = cfg.sim.schedule;
    if let Some(v) = args.detection_rate {
        s.detection_rate = v;
    }
    if let Some(v) = args.depth_rate {
        s.depth_rate = v;
    }
    if let Some(v) = args.depth_latency {
        s.depth_latency = v;
    }
    if let Some(p) = args.policy {
        s.overlap_policy = match p {
            Policy::Drop => OverlapPolicy::Drop,
            Policy::QueueOne => OverlapPolicy::QueueOne,
        };
    }
    let trace = trace_schedule(&s, args.duration).map_err(CliError::validation)?;
    write_text(args.out.as_deref(), &trace.to_jsonl())?;
    eprintln!(
        "{} detect, {} depth_start, {} depth_ready",
        trace.count(Channel::Detect),
        trace.count(Channel::DepthStart),
        trace.count(Channel::DepthReady)
    );
    Ok(())
}

fn serve(args: ServeArgs) -> Result<(), CliError> {
    let mut cfg = AppConfig::load_or_default(args.config.as_deref())?;
    if let Some(l) = args.listen {
        cfg.server.listen = l;
    }
    if let Some(r) = args.frame_rate_limit {
        cfg.server.frame_rate_limit = r;
    }
    if let Some(d) = args.paths_dir {
        cfg.server.paths_dir = Some(d);
    }
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::Io(format!("runtime: {e}")))?;
    rt.block_on(server::run(cfg))
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Render(a) => render(a),
        Command::Match(a) => match_pair(a),
        Command::Simulate(a) => simulate(a),
        Command::Eval(a) => eval(a),
        Command::Serve(a) => serve(a),
        Command::Trace(a) => trace(a),
        Command::Schema => write_text(None, crate::protocol::SCHEMA),
    }
}

/// Parses `args` and runs the command, returning the process exit code:
/// 0 on success, 1 for usage or validation errors, 2 for I/O errors.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
