//! Headless simulation: a boulder scene, the two perception channels, the
//! scheduler and the rover driven through a path plan, optionally logged
//! to a session directory.

use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detect::{detect, DetectorConfig};
use crate::eval::{
    nav_metrics, EvalError, NavReport, Record, SessionLogger, TelemetryConfig, TelemetryGenerator,
    INTENDED_RESOLUTION,
};
use crate::geometry::{CameraIntrinsics, CameraPose, GeometryError, StereoRig};
use crate::monodepth::{
    BackendRegistry, MonoDepthBackend, MonoDepthConfig, MonoDepthError, MonoDepthInput,
    MonoDepthResult,
};
use crate::pipeline::{
    DepthJob, DetectOutput, PerceptionSnapshot, Pipeline, PipelineError, ScheduleConfig,
};
use crate::raster::{DepthMap, Grid};
use crate::rover::{
    execute_path, DriveParams, ExecutionReport, PathExecutor, PathPlan, Perception, RoverError,
    RoverState, SafetyConfig,
};
use crate::scene::{
    render_depth, render_view, Hit, RenderOptions, SceneDescription, SceneError, SceneSpec,
};
use crate::stereo::SgmParams;

/// Detection ticks between logged camera images.
pub const RGB_LOG_EVERY: usize = 10;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    MonoDepth(#[from] MonoDepthError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Rover(#[from] RoverError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// The rover-mounted stereo camera.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraMount {
    pub width_px: usize,
    pub height_px: usize,
    pub fov_h_deg: f64,
    /// Scene units.
    pub baseline: f64,
    pub units_per_meter: f64,
    /// Camera height above the terrain under the rover, scene units.
    pub height: f64,
    /// Degrees below the horizon.
    pub pitch_deg: f64,
}

impl Default for CameraMount {
    fn default() -> Self {
        Self {
            width_px: 128,
            height_px: 96,
            fov_h_deg: 60.0,
            baseline: 0.06,
            units_per_meter: 1.0,
            height: 0.15,
            pitch_deg: 10.0,
        }
    }
}

impl CameraMount {
    pub fn intrinsics(&self) -> Result<CameraIntrinsics, GeometryError> {
        CameraIntrinsics::new(self.width_px, self.height_px, self.fov_h_deg)
    }

    pub fn rig(&self) -> Result<StereoRig, GeometryError> {
        StereoRig::new(self.intrinsics()?, self.baseline)?
            .with_units_per_meter(self.units_per_meter)
    }

    /// Left-camera pose for a rover at `state` on `scene`.
    pub fn pose(&self, scene: &SceneDescription, state: &RoverState) -> CameraPose {
        let ground = scene.terrain.height_at(state.x, state.y).unwrap_or(0.0);
        CameraPose::new(
            [state.x, state.y, ground + self.height],
            state.heading,
            self.pitch_deg.to_radians(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoverConfig {
    pub wheel_speed: f64,
    pub track_width: f64,
    /// `(x, y, heading)` in scene units and radians.
    pub start: [f64; 3],
}

impl Default for RoverConfig {
    fn default() -> Self {
        let d = DriveParams::default();
        Self {
            wheel_speed: d.wheel_speed,
            track_width: d.track_width,
            start: [0.0, 0.0, 0.0],
        }
    }
}

impl RoverConfig {
    pub fn drive(&self) -> DriveParams {
        DriveParams {
            wheel_speed: self.wheel_speed,
            track_width: self.track_width,
        }
    }

    pub fn start_state(&self) -> RoverState {
        RoverState::at(self.start[0], self.start[1], self.start[2])
    }
}

/// Every knob of a headless run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub scene: SceneSpec,
    pub rig: CameraMount,
    pub sgm: SgmParams,
    pub monodepth: MonoDepthConfig,
    pub detector: DetectorConfig,
    pub schedule: ScheduleConfig,
    pub rover: RoverConfig,
    pub safety: SafetyConfig,
    pub telemetry: TelemetryConfig,
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        self.rig.rig()?;
        if !(self.rig.height > 0.0) {
            return Err(SimError::Config("rig.height must be positive".into()));
        }
        self.sgm
            .validate()
            .map_err(|e| SimError::Config(e.to_string()))?;
        self.monodepth.validate()?;
        self.detector
            .validate()
            .map_err(|e| SimError::Config(e.to_string()))?;
        self.schedule.validate()?;
        self.rover.drive().validate()?;
        self.safety.validate()?;
        if self.monodepth.latency != self.schedule.depth_latency {
            return Err(SimError::Config(format!(
                "monodepth.latency ({}) must equal schedule.depth_latency ({})",
                self.monodepth.latency, self.schedule.depth_latency
            )));
        }
        Ok(())
    }
}

/// Keeps depth only where the ray hit a boulder, converted to meters.
/// Everything else becomes invalid.
pub fn obstacle_depth_m(depth: &DepthMap, hits: &Grid<Hit>, units_per_meter: f64) -> DepthMap {
    let values = Grid::from_fn(depth.width(), depth.height(), |x, y| match hits.get(x, y) {
        Hit::Boulder(_) => (*depth.values().get(x, y) as f64 / units_per_meter) as f32,
        _ => DepthMap::INVALID,
    });
    DepthMap::new(values)
}

fn to_meters(depth: &DepthMap, units_per_meter: f64) -> DepthMap {
    DepthMap::new(depth.values().map(|&z| {
        if z.is_finite() {
            (z as f64 / units_per_meter) as f32
        } else {
            DepthMap::INVALID
        }
    }))
}

type PendingTruth = Arc<Mutex<Vec<(f64, DepthMap)>>>;

/// Simulated perception for a rover on a rendered scene: the fast channel
/// detects boulders from ground-truth depth, the slow channel runs a
/// monocular depth backend on a rendered view.
pub struct SimPerception {
    scene: Arc<SceneDescription>,
    mount: CameraMount,
    intrinsics: CameraIntrinsics,
    detector: DetectorConfig,
    backend: Arc<dyn MonoDepthBackend>,
    mono: MonoDepthConfig,
    logger: Option<Arc<SessionLogger>>,
    telemetry: TelemetryGenerator,
    pending_truth: PendingTruth,
    last_depth_capture: Option<f64>,
    ticks: usize,
    error: Option<EvalError>,
}

impl SimPerception {
    pub fn new(
        scene: Arc<SceneDescription>,
        config: &SimConfig,
        registry: &BackendRegistry,
        logger: Option<Arc<SessionLogger>>,
    ) -> Result<Self, SimError> {
        Ok(Self {
            scene,
            mount: config.rig,
            intrinsics: config.rig.intrinsics()?,
            detector: config.detector,
            backend: registry.select(&config.monodepth)?,
            mono: config.monodepth.clone(),
            logger,
            telemetry: TelemetryGenerator::new(config.telemetry),
            pending_truth: Arc::default(),
            last_depth_capture: None,
            ticks: 0,
            error: None,
        })
    }

    /// First logging failure, if any. Logging stops after it.
    pub fn take_error(&mut self) -> Option<EvalError> {
        self.error.take()
    }

    fn log(&mut self, record: Record<'_>) {
        if self.error.is_some() {
            return;
        }
        if let Some(logger) = &self.logger {
            if let Err(e) = logger.log(record) {
                self.error = Some(e);
            }
        }
    }

    fn take_truth(&self, capture: f64) -> Option<DepthMap> {
        let mut pending = self.pending_truth.lock().expect("truth lock");
        let pos = pending.iter().position(|(t, _)| *t == capture)?;
        let (_, gt) = pending.swap_remove(pos);
        Some(gt)
    }
}

impl Perception for SimPerception {
    fn detect(&mut self, t: f64, state: &RoverState) -> DetectOutput {
        let pose = self.mount.pose(&self.scene, state);
        let frame_width = self.intrinsics.width();
        match render_depth(&self.scene, &self.intrinsics, &pose) {
            Ok((depth, hits)) => {
                let near = obstacle_depth_m(&depth, &hits, self.mount.units_per_meter);
                DetectOutput {
                    detections: detect(&near, &self.detector, t),
                    frame_width,
                }
            }
            Err(e) => {
                tracing::warn!(error = %e, "detection render failed");
                DetectOutput {
                    detections: Vec::new(),
                    frame_width,
                }
            }
        }
    }

    fn depth_job(&mut self, t: f64, state: &RoverState) -> DepthJob {
        let scene = Arc::clone(&self.scene);
        let pose = self.mount.pose(&scene, state);
        let k = self.intrinsics;
        let upm = self.mount.units_per_meter;
        let backend = Arc::clone(&self.backend);
        let cfg = self.mono.clone();
        let truth = Arc::clone(&self.pending_truth);
        DepthJob::new(move || {
            let invalid = || MonoDepthResult {
                depth: DepthMap::invalid(k.width(), k.height()),
                capture_timestamp: t,
                ready_timestamp: t + cfg.latency,
                backend_id: cfg.backend.clone(),
            };
            let view = match render_view(&scene, &k, &pose, &RenderOptions::default()) {
                Ok(v) => v,
                Err(e) => {
                    tracing::warn!(error = %e, "depth render failed");
                    return invalid();
                }
            };
            let gt = to_meters(&view.depth, upm);
            let input = MonoDepthInput {
                image: &view.image,
                gt_depth_m: Some(&gt),
                capture_timestamp: t,
            };
            let result = backend.estimate(&cfg, input).unwrap_or_else(|e| {
                tracing::warn!(error = %e, "depth backend failed");
                invalid()
            });
            truth.lock().expect("truth lock").push((t, gt));
            result
        })
    }

    fn on_start(&mut self, exec: &PathExecutor) {
        let sample = *exec.last_sample();
        self.log(Record::Pose {
            t: sample.t,
            state: exec.state(),
        });
    }

    fn after_tick(&mut self, snapshot: &PerceptionSnapshot, exec: &PathExecutor) {
        let t = snapshot.timestamp;
        self.log(Record::Detections {
            t,
            frame_width: snapshot.frame_width,
            detections: &snapshot.detections,
        });
        let sample = *exec.last_sample();
        self.log(Record::Pose {
            t: sample.t,
            state: exec.state(),
        });
        let tel = self.telemetry.sample(t);
        self.log(Record::Telemetry(&tel));
        if self.logger.is_some() && self.ticks % RGB_LOG_EVERY == 0 {
            let pose = self.mount.pose(&self.scene, exec.state());
            match render_view(
                &self.scene,
                &self.intrinsics,
                &pose,
                &RenderOptions::default(),
            ) {
                Ok(view) => self.log(Record::Rgb {
                    t,
                    image: &view.image,
                }),
                Err(e) => tracing::warn!(error = %e, "image render failed"),
            }
        }
        if let Some(depth) = &snapshot.depth {
            if self.last_depth_capture != Some(depth.capture_timestamp) {
                self.last_depth_capture = Some(depth.capture_timestamp);
                let gt = self.take_truth(depth.capture_timestamp);
                let depth = Arc::clone(depth);
                self.log(Record::Depth {
                    t: depth.capture_timestamp,
                    estimate: &depth.depth,
                    ground_truth: gt.as_ref(),
                });
            }
        }
        self.ticks += 1;
    }
}

#[derive(Debug, Clone)]
pub struct SimOutcome {
    pub report: ExecutionReport,
    pub nav: NavReport,
    pub intended: Vec<(f64, f64)>,
    pub run_dir: Option<PathBuf>,
}

/// A configured scene ready to run plans.
pub struct Simulation {
    config: SimConfig,
    scene: Arc<SceneDescription>,
    registry: BackendRegistry,
}

impl Simulation {
    pub fn new(config: SimConfig) -> Result<Self, SimError> {
        Self::with_registry(config, BackendRegistry::with_builtin())
    }

    pub fn with_registry(config: SimConfig, registry: BackendRegistry) -> Result<Self, SimError> {
        config.validate()?;
        let scene = Arc::new(SceneDescription::from_spec(&config.scene)?);
        Ok(Self {
            config,
            scene,
            registry,
        })
    }

    /// Uses an already built scene instead of the one in the config.
    pub fn with_scene(config: SimConfig, scene: SceneDescription) -> Result<Self, SimError> {
        config.validate()?;
        Ok(Self {
            config,
            scene: Arc::new(scene),
            registry: BackendRegistry::with_builtin(),
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn scene(&self) -> &Arc<SceneDescription> {
        &self.scene
    }

    /// Runs `plan` from the configured start. With `log = Some((root,
    /// run_id))` the run is recorded under `root/run_id`.
    pub fn run(&self, plan: &PathPlan, log: Option<(&Path, &str)>) -> Result<SimOutcome, SimError> {
        let cfg = &self.config;
        let drive = cfg.rover.drive();
        let start = cfg.rover.start_state();
        let logger = match log {
            Some((root, id)) => Some(Arc::new(SessionLogger::create(root, id)?)),
            None => None,
        };
        if let Some(l) = &logger {
            l.set_meta("plan", serde_json::to_value(plan).expect("plan"));
            l.set_meta("start", serde_json::to_value(&start).expect("state"));
            l.set_meta("drive", serde_json::to_value(drive).expect("drive"));
            l.set_meta("safety", serde_json::to_value(cfg.safety).expect("safety"));
        }
        let mut perception =
            SimPerception::new(Arc::clone(&self.scene), cfg, &self.registry, logger.clone())?;
        let pipeline = Pipeline::new(cfg.schedule)?;
        let report = execute_path(
            plan,
            start.clone(),
            &pipeline,
            &mut perception,
            &drive,
            &cfg.safety,
        )?;
        if let Some(e) = perception.take_error() {
            return Err(e.into());
        }
        let intended = plan.intended_polyline(&start, &drive, INTENDED_RESOLUTION);
        let nav = nav_metrics(&report, &intended)?;
        drop(perception);
        let run_dir = match logger {
            Some(l) => {
                l.set_meta(
                    "elapsed",
                    serde_json::to_value(report.elapsed).expect("f64"),
                );
                let l = Arc::try_unwrap(l)
                    .map_err(|_| SimError::Config("session logger still shared".into()))?;
                Some(l.finish()?)
            }
            None => None,
        };
        Ok(SimOutcome {
            report,
            nav,
            intended,
            run_dir,
        })
    }
}

/// Seeded rover courses for halt and completion checks.
pub mod courses {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::SimConfig;
    use crate::eval::{point_polyline_distance, INTENDED_RESOLUTION};
    use crate::rover::{step, MotorCommand, PathPlan, PathStep, RoverState};
    use crate::scene::{generate_terrain, Boulder, SceneDescription, SceneError, TextureParams};

    /// A scene, a plan and the start pose; `target` is the boulder placed
    /// on the path, if any.
    #[derive(Debug, Clone)]
    pub struct Course {
        pub config: SimConfig,
        pub scene: SceneDescription,
        pub plan: PathPlan,
        pub target: Option<Boulder>,
    }

    const EXTENT: f64 = 10.0;

    fn base(seed: u64, rng: &mut ChaCha8Rng) -> (SimConfig, crate::scene::Terrain) {
        let mut config = SimConfig::default();
        config.scene.seed = seed;
        config.monodepth.seed = seed;
        config.telemetry.seed = seed;
        let heading = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        config.rover.start = [
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            heading,
        ];
        let terrain = generate_terrain(seed, (EXTENT, EXTENT), 0.1, 0.02).expect("valid terrain");
        (config, terrain)
    }

    fn boulder(
        terrain: &crate::scene::Terrain,
        id: u32,
        x: f64,
        y: f64,
        r: f64,
        rng: &mut ChaCha8Rng,
    ) -> Boulder {
        let radii = [
            r * rng.random_range(0.9..1.1),
            r * rng.random_range(0.9..1.1),
            r * rng.random_range(0.7..1.0),
        ];
        let ground = terrain.height_at(x, y).unwrap_or(0.0);
        Boulder {
            id,
            center: [x, y, ground + radii[2]],
            radii,
        }
    }

    fn scene(
        config: &SimConfig,
        terrain: crate::scene::Terrain,
        boulders: Vec<Boulder>,
    ) -> Result<SceneDescription, SceneError> {
        Ok(SceneDescription::new(
            terrain,
            boulders,
            config.scene.sun_direction,
            config.scene.albedo,
        )?
        .with_texture(TextureParams {
            amplitude: config.scene.texture_amplitude,
            scale: config.scene.texture_scale,
        }))
    }

    /// Pose after running the plan's steps ideally.
    fn pose_after(start: &RoverState, steps: &[PathStep], config: &SimConfig) -> RoverState {
        let drive = config.rover.drive();
        steps.iter().fold(start.clone(), |s, p| {
            step(&s, p.command, p.duration_s, &drive).expect("positive duration")
        })
    }

    /// Distractor boulders kept at least `clearance` beyond their radius
    /// from the intended route.
    fn distractors(
        terrain: &crate::scene::Terrain,
        route: &[(f64, f64)],
        count: usize,
        first_id: u32,
        clearance: f64,
        rng: &mut ChaCha8Rng,
    ) -> Vec<Boulder> {
        let mut out = Vec::new();
        let half = EXTENT / 2.0 - 0.5;
        let mut attempts = 0;
        while out.len() < count && attempts < 1000 {
            attempts += 1;
            let r = rng.random_range(0.06..0.12);
            let (x, y) = (rng.random_range(-half..half), rng.random_range(-half..half));
            if point_polyline_distance((x, y), route) < r * 1.1 + clearance {
                continue;
            }
            out.push(boulder(terrain, first_id + out.len() as u32, x, y, r, rng));
        }
        out
    }

    /// A short spin, then a long straight run into a boulder that sits on
    /// the path between 1.0 and 2.5 m ahead.
    pub fn blocked(seed: u64) -> Course {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0_75E);
        let (config, terrain) = base(seed, &mut rng);
        let start = config.rover.start_state();
        let spin = PathStep {
            duration_s: rng.random_range(0.1..0.5),
            command: if rng.random_bool(0.5) {
                MotorCommand::SPIN_LEFT
            } else {
                MotorCommand::SPIN_RIGHT
            },
        };
        let run = PathStep {
            duration_s: 8.0,
            command: MotorCommand::FORWARD,
        };
        let aim = pose_after(&start, &[spin], &config);
        let ahead = rng.random_range(1.0..2.5);
        let lateral = rng.random_range(-0.05..0.05);
        let (s, c) = aim.heading.sin_cos();
        let (x, y) = (
            aim.x + ahead * c - lateral * s,
            aim.y + ahead * s + lateral * c,
        );
        let target = boulder(&terrain, 0, x, y, rng.random_range(0.06..0.12), &mut rng);
        let plan = PathPlan {
            name: format!("blocked-{seed}"),
            steps: vec![spin, run],
        };
        let route = plan.intended_polyline(&start, &config.rover.drive(), INTENDED_RESOLUTION);
        let mut boulders = vec![target];
        boulders.extend(distractors(&terrain, &route, 3, 1, 0.7, &mut rng));
        let scene = scene(&config, terrain, boulders).expect("valid scene");
        Course {
            config,
            scene,
            plan,
            target: Some(target),
        }
    }

    /// Straight runs and spins in place with every boulder well clear of
    /// the route.
    pub fn clear(seed: u64) -> Course {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC1_EA2);
        let (config, terrain) = base(seed, &mut rng);
        let start = config.rover.start_state();
        let mut steps = Vec::new();
        for i in 0..rng.random_range(2..5) {
            let command = if i % 2 == 0 {
                MotorCommand::FORWARD
            } else if rng.random_bool(0.5) {
                MotorCommand::SPIN_LEFT
            } else {
                MotorCommand::SPIN_RIGHT
            };
            let duration_s = if command == MotorCommand::FORWARD {
                rng.random_range(0.5..2.5)
            } else {
                rng.random_range(0.1..0.9)
            };
            steps.push(PathStep {
                duration_s,
                command,
            });
        }
        let plan = PathPlan {
            name: format!("clear-{seed}"),
            steps,
        };
        let route = plan.intended_polyline(&start, &config.rover.drive(), INTENDED_RESOLUTION);
        let boulders = distractors(&terrain, &route, 6, 0, 0.7, &mut rng);
        let scene = scene(&config, terrain, boulders).expect("valid scene");
        Course {
            config,
            scene,
            plan,
            target: None,
        }
    }
}
