//! Differential-drive rover: key mapping, exact arc kinematics, the
//! latching obstacle gate and timed path execution.

use std::f64::consts::PI;
use std::ops::ControlFlow;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pipeline::{DepthJob, DetectOutput, PerceptionSnapshot, Pipeline, PipelineError, World};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RoverError {
    #[error("time step must be positive, got {0}")]
    NonPositiveDt(f64),
    #[error("invalid motor level {0}; expected -1, 0 or 1")]
    InvalidLevel(i64),
    #[error("invalid path plan: {0}")]
    InvalidPlan(String),
    #[error("invalid rover parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RoverState {
    pub x: f64,
    pub y: f64,
    /// Radians counter-clockwise from +x, in `(-pi, pi]`.
    pub heading: f64,
    pub linear_speed: f64,
    pub angular_speed: f64,
    pub halted: bool,
    pub halt_reason: Option<String>,
}

impl RoverState {
    pub fn at(x: f64, y: f64, heading: f64) -> Self {
        Self {
            x,
            y,
            heading: wrap_angle(heading),
            ..Default::default()
        }
    }

    pub fn halt(&mut self, reason: impl Into<String>) {
        self.halted = true;
        self.halt_reason = Some(reason.into());
        self.linear_speed = 0.0;
        self.angular_speed = 0.0;
    }

    /// Clears a latched halt.
    pub fn resume(&mut self) {
        self.halted = false;
        self.halt_reason = None;
    }
}

/// Bang-bang wheel levels, each in `{-1, 0, 1}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "RawCommand", into = "RawCommand")]
pub struct MotorCommand {
    left: i8,
    right: i8,
}

#[derive(Serialize, Deserialize)]
struct RawCommand {
    left: i64,
    right: i64,
}

impl TryFrom<RawCommand> for MotorCommand {
    type Error = RoverError;
    fn try_from(r: RawCommand) -> Result<Self, RoverError> {
        MotorCommand::new(r.left, r.right)
    }
}

impl From<MotorCommand> for RawCommand {
    fn from(c: MotorCommand) -> Self {
        RawCommand {
            left: c.left as i64,
            right: c.right as i64,
        }
    }
}

impl MotorCommand {
    pub const STOP: MotorCommand = MotorCommand { left: 0, right: 0 };
    pub const FORWARD: MotorCommand = MotorCommand { left: 1, right: 1 };
    pub const BACKWARD: MotorCommand = MotorCommand {
        left: -1,
        right: -1,
    };
    pub const SPIN_LEFT: MotorCommand = MotorCommand { left: -1, right: 1 };
    pub const SPIN_RIGHT: MotorCommand = MotorCommand { left: 1, right: -1 };

    pub fn new(left: i64, right: i64) -> Result<Self, RoverError> {
        for v in [left, right] {
            if !(-1..=1).contains(&v) {
                return Err(RoverError::InvalidLevel(v));
            }
        }
        Ok(Self {
            left: left as i8,
            right: right as i8,
        })
    }

    pub fn left(&self) -> i8 {
        self.left
    }

    pub fn right(&self) -> i8 {
        self.right
    }

    pub fn negated(&self) -> Self {
        Self {
            left: -self.left,
            right: -self.right,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyMapping {
    pub command: MotorCommand,
    /// Set for unrecognized keys, which map to a stop.
    pub warning: Option<String>,
}

/// WASD teleoperation: `w` forward, `s` backward, `a` spin left, `d` spin
/// right, space (or `"space"`) stop. Case-insensitive.
pub fn map_key(key: &str) -> KeyMapping {
    let command = match key.to_ascii_lowercase().as_str() {
        "w" => Some(MotorCommand::FORWARD),
        "s" => Some(MotorCommand::BACKWARD),
        "a" => Some(MotorCommand::SPIN_LEFT),
        "d" => Some(MotorCommand::SPIN_RIGHT),
        " " | "space" => Some(MotorCommand::STOP),
        _ => None,
    };
    match command {
        Some(command) => KeyMapping {
            command,
            warning: None,
        },
        None => {
            tracing::warn!(key, "unknown teleop key");
            KeyMapping {
                command: MotorCommand::STOP,
                warning: Some(format!("unknown key {key:?}; stopping")),
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DriveParams {
    /// Wheel ground speed at level 1, units per second.
    pub wheel_speed: f64,
    /// Distance between the wheels, units.
    pub track_width: f64,
}

impl Default for DriveParams {
    fn default() -> Self {
        Self {
            wheel_speed: 0.5,
            track_width: 0.3,
        }
    }
}

impl DriveParams {
    pub fn validate(&self) -> Result<(), RoverError> {
        if !(self.wheel_speed > 0.0 && self.wheel_speed.is_finite()) {
            return Err(RoverError::InvalidParams(
                "wheel_speed must be positive".into(),
            ));
        }
        if !(self.track_width > 0.0 && self.track_width.is_finite()) {
            return Err(RoverError::InvalidParams(
                "track_width must be positive".into(),
            ));
        }
        Ok(())
    }

    /// `(v, omega)` for a command.
    pub fn velocities(&self, cmd: MotorCommand) -> (f64, f64) {
        let (l, r) = (cmd.left as f64, cmd.right as f64);
        (
            self.wheel_speed * (l + r) / 2.0,
            self.wheel_speed * (r - l) / self.track_width,
        )
    }
}

/// Advances the rover by `dt` seconds under `cmd` with exact arc
/// integration. A halted rover stays put with zero speeds.
pub fn step(
    state: &RoverState,
    cmd: MotorCommand,
    dt: f64,
    params: &DriveParams,
) -> Result<RoverState, RoverError> {
    if !(dt > 0.0) {
        return Err(RoverError::NonPositiveDt(dt));
    }
    let mut next = state.clone();
    if state.halted {
        next.linear_speed = 0.0;
        next.angular_speed = 0.0;
        return Ok(next);
    }
    let (v, w) = params.velocities(cmd);
    let h0 = state.heading;
    if w == 0.0 {
        next.x += v * h0.cos() * dt;
        next.y += v * h0.sin() * dt;
        next.heading = h0;
    } else {
        let h1 = h0 + w * dt;
        let radius = v / w;
        next.x += radius * (h1.sin() - h0.sin());
        next.y -= radius * (h1.cos() - h0.cos());
        next.heading = wrap_angle(h1);
    }
    next.linear_speed = v;
    next.angular_speed = w;
    Ok(next)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SafetyConfig {
    /// Meters.
    pub stop_range: f64,
    /// Half-width of the central image corridor as a fraction of the
    /// image width.
    pub corridor_halfwidth: f64,
}

impl Default for SafetyConfig {
    fn default() -> Self {
        Self {
            stop_range: 0.5,
            corridor_halfwidth: 0.2,
        }
    }
}

impl SafetyConfig {
    pub fn validate(&self) -> Result<(), RoverError> {
        if !(self.stop_range > 0.0 && self.stop_range.is_finite()) {
            return Err(RoverError::InvalidParams(
                "stop_range must be positive".into(),
            ));
        }
        if !(self.corridor_halfwidth > 0.0 && self.corridor_halfwidth <= 0.5) {
            return Err(RoverError::InvalidParams(
                "corridor_halfwidth must be in (0, 0.5]".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SafetyDecision {
    Proceed,
    Halt(String),
}

/// Stateless check: halt iff some detection is nearer than `stop_range`
/// with its box center inside the central corridor.
pub fn check_snapshot(snapshot: &PerceptionSnapshot, config: &SafetyConfig) -> SafetyDecision {
    let w = snapshot.frame_width as f64;
    let (lo, hi) = (
        w * (0.5 - config.corridor_halfwidth),
        w * (0.5 + config.corridor_halfwidth),
    );
    for d in &snapshot.detections {
        let Some(range) = d.range_m else { continue };
        let cx = d.bbox.center_x();
        if range < config.stop_range && cx >= lo && cx <= hi {
            return SafetyDecision::Halt(format!(
                "obstacle at {range:.2} m in path (box center x {cx:.0} of {w:.0})"
            ));
        }
    }
    SafetyDecision::Proceed
}

/// Latching safety gate: once it halts, it keeps halting until `resume`.
#[derive(Debug, Clone, Default)]
pub struct SafetyGate {
    config: SafetyConfig,
    latched: Option<String>,
}

impl SafetyGate {
    pub fn new(config: SafetyConfig) -> Self {
        Self {
            config,
            latched: None,
        }
    }

    pub fn config(&self) -> &SafetyConfig {
        &self.config
    }

    pub fn evaluate(&mut self, snapshot: &PerceptionSnapshot) -> SafetyDecision {
        if let Some(reason) = &self.latched {
            return SafetyDecision::Halt(reason.clone());
        }
        let decision = check_snapshot(snapshot, &self.config);
        if let SafetyDecision::Halt(reason) = &decision {
            self.latched = Some(reason.clone());
        }
        decision
    }

    pub fn is_latched(&self) -> bool {
        self.latched.is_some()
    }

    /// Clears the latch; returns false when it was not set.
    pub fn resume(&mut self) -> bool {
        self.latched.take().is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathStep {
    pub duration_s: f64,
    #[serde(flatten)]
    pub command: MotorCommand,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathPlan {
    pub name: String,
    pub steps: Vec<PathStep>,
}

impl PathPlan {
    pub fn validate(&self) -> Result<(), RoverError> {
        for (i, s) in self.steps.iter().enumerate() {
            if !(s.duration_s > 0.0 && s.duration_s.is_finite()) {
                return Err(RoverError::InvalidPlan(format!(
                    "step {i} has non-positive duration {}",
                    s.duration_s
                )));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, RoverError> {
        let plan: PathPlan =
            serde_json::from_str(text).map_err(|e| RoverError::InvalidPlan(e.to_string()))?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn total_duration(&self) -> f64 {
        self.steps.iter().map(|s| s.duration_s).sum()
    }

    /// Ideal route from `start`, sampled every `resolution` seconds of plan
    /// time and at every step boundary.
    pub fn intended_polyline(
        &self,
        start: &RoverState,
        params: &DriveParams,
        resolution: f64,
    ) -> Vec<(f64, f64)> {
        let mut state = start.clone();
        state.resume();
        let mut pts = vec![(state.x, state.y)];
        for s in &self.steps {
            let n = (s.duration_s / resolution).ceil().max(1.0) as usize;
            let dt = s.duration_s / n as f64;
            for _ in 0..n {
                state = step(&state, s.command, dt, params).expect("positive dt");
                let p = (state.x, state.y);
                if pts.last() != Some(&p) {
                    pts.push(p);
                }
            }
        }
        pts
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseSample {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub halted: bool,
}

impl PoseSample {
    pub fn of(t: f64, s: &RoverState) -> Self {
        Self {
            t,
            x: s.x,
            y: s.y,
            heading: s.heading,
            halted: s.halted,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HaltEvent {
    pub t: f64,
    pub reason: String,
    pub x: f64,
    pub y: f64,
    /// Range of the nearest in-corridor detection that caused the halt.
    pub range_m: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionReport {
    pub completed: bool,
    pub elapsed: f64,
    pub trajectory: Vec<PoseSample>,
    pub halt_events: Vec<HaltEvent>,
}

impl ExecutionReport {
    /// Trajectory as JSONL rows `{"t","x","y","heading","halted"}`.
    pub fn trajectory_jsonl(&self) -> String {
        let mut s = String::new();
        for p in &self.trajectory {
            s.push_str(&serde_json::to_string(p).expect("plain struct"));
            s.push('\n');
        }
        s
    }
}

/// Steps a plan forward one control period at a time, consulting the
/// safety gate before each move.
#[derive(Debug, Clone)]
pub struct PathExecutor {
    plan: PathPlan,
    drive: DriveParams,
    gate: SafetyGate,
    dt: f64,
    state: RoverState,
    step_index: usize,
    step_elapsed: f64,
    elapsed: f64,
    trajectory: Vec<PoseSample>,
    halt_events: Vec<HaltEvent>,
    completed: bool,
}

impl PathExecutor {
    pub fn new(
        plan: PathPlan,
        start: RoverState,
        drive: DriveParams,
        safety: SafetyConfig,
        control_rate: f64,
    ) -> Result<Self, RoverError> {
        plan.validate()?;
        drive.validate()?;
        safety.validate()?;
        if !(control_rate > 0.0 && control_rate.is_finite()) {
            return Err(RoverError::InvalidParams(
                "control_rate must be positive".into(),
            ));
        }
        let trajectory = vec![PoseSample::of(0.0, &start)];
        let completed = plan.steps.is_empty();
        Ok(Self {
            plan,
            drive,
            gate: SafetyGate::new(safety),
            dt: 1.0 / control_rate,
            state: start,
            step_index: 0,
            step_elapsed: 0.0,
            elapsed: 0.0,
            trajectory,
            halt_events: Vec::new(),
            completed,
        })
    }

    pub fn state(&self) -> &RoverState {
        &self.state
    }

    /// Most recent trajectory sample.
    pub fn last_sample(&self) -> &PoseSample {
        self.trajectory
            .last()
            .expect("trajectory starts with the initial pose")
    }

    pub fn plan(&self) -> &PathPlan {
        &self.plan
    }

    pub fn is_done(&self) -> bool {
        self.completed || self.state.halted
    }

    /// Handles one control tick. `Break` once the plan completes or the
    /// gate halts the rover.
    pub fn on_snapshot(&mut self, snapshot: &PerceptionSnapshot) -> ControlFlow<()> {
        if self.is_done() {
            return ControlFlow::Break(());
        }
        if let SafetyDecision::Halt(reason) = self.gate.evaluate(snapshot) {
            let range_m = nearest_in_corridor(snapshot, self.gate.config());
            self.state.halt(reason.clone());
            self.halt_events.push(HaltEvent {
                t: snapshot.timestamp,
                reason,
                x: self.state.x,
                y: self.state.y,
                range_m,
            });
            self.trajectory
                .push(PoseSample::of(self.elapsed, &self.state));
            return ControlFlow::Break(());
        }
        self.advance(self.dt);
        self.trajectory
            .push(PoseSample::of(self.elapsed, &self.state));
        if self.completed {
            ControlFlow::Break(())
        } else {
            ControlFlow::Continue(())
        }
    }

    /// Consumes up to `dt` seconds of plan time across step boundaries.
    fn advance(&mut self, dt: f64) {
        const EPS: f64 = 1e-12;
        let mut left = dt;
        while left > EPS && self.step_index < self.plan.steps.len() {
            let s = self.plan.steps[self.step_index];
            let chunk = (s.duration_s - self.step_elapsed).min(left);
            if chunk > 0.0 {
                self.state =
                    step(&self.state, s.command, chunk, &self.drive).expect("positive chunk");
            }
            self.step_elapsed += chunk;
            self.elapsed += chunk;
            left -= chunk;
            if s.duration_s - self.step_elapsed <= EPS {
                self.step_index += 1;
                self.step_elapsed = 0.0;
            }
        }
        if self.step_index >= self.plan.steps.len() {
            self.completed = true;
            self.state.linear_speed = 0.0;
            self.state.angular_speed = 0.0;
        }
    }

    pub fn report(&self) -> ExecutionReport {
        ExecutionReport {
            completed: self.completed && !self.state.halted,
            elapsed: self.elapsed,
            trajectory: self.trajectory.clone(),
            halt_events: self.halt_events.clone(),
        }
    }
}

/// Nearest sensed range among detections centred in the corridor.
pub fn nearest_in_corridor(snapshot: &PerceptionSnapshot, config: &SafetyConfig) -> Option<f64> {
    let w = snapshot.frame_width as f64;
    let (lo, hi) = (
        w * (0.5 - config.corridor_halfwidth),
        w * (0.5 + config.corridor_halfwidth),
    );
    snapshot
        .detections
        .iter()
        .filter(|d| (lo..=hi).contains(&d.bbox.center_x()))
        .filter_map(|d| d.range_m)
        .min_by(|a, b| a.total_cmp(b))
}

/// Perception seen from the rover: both channels observe the world from
/// the rover's current pose.
pub trait Perception {
    fn detect(&mut self, t: f64, state: &RoverState) -> DetectOutput;
    fn depth_job(&mut self, t: f64, state: &RoverState) -> DepthJob;
    /// Called once before the first tick.
    fn on_start(&mut self, _exec: &PathExecutor) {}
    /// Called after each control tick with the snapshot it consumed and
    /// the executor holding the resulting state.
    fn after_tick(&mut self, _snapshot: &PerceptionSnapshot, _exec: &PathExecutor) {}
}

struct ExecWorld<'a, P: Perception> {
    exec: &'a mut PathExecutor,
    perception: &'a mut P,
}

impl<P: Perception> World for ExecWorld<'_, P> {
    fn detect(&mut self, t: f64) -> DetectOutput {
        self.perception.detect(t, self.exec.state())
    }

    fn depth_job(&mut self, t: f64) -> DepthJob {
        self.perception.depth_job(t, self.exec.state())
    }

    fn on_snapshot(&mut self, snapshot: &Arc<PerceptionSnapshot>) -> ControlFlow<()> {
        let flow = self.exec.on_snapshot(snapshot);
        self.perception.after_tick(snapshot, self.exec);
        flow
    }
}

/// Runs `plan` under the pipeline with the control loop tied to the
/// detection ticks.
pub fn execute_path<P: Perception>(
    plan: &PathPlan,
    start: RoverState,
    pipeline: &Pipeline,
    perception: &mut P,
    drive: &DriveParams,
    safety: &SafetyConfig,
) -> Result<ExecutionReport, RoverError> {
    let rate = pipeline.config().detection_rate;
    let mut exec = PathExecutor::new(plan.clone(), start, *drive, *safety, rate)?;
    perception.on_start(&exec);
    if exec.is_done() {
        return Ok(exec.report());
    }
    let duration = plan.total_duration() + 2.0 / rate;
    let mut world = ExecWorld {
        exec: &mut exec,
        perception,
    };
    pipeline.run(duration, &mut world)?;
    Ok(exec.report())
}
