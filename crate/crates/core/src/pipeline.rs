//! Hybrid perception scheduler: a fast periodic detection channel and a
//! slow asynchronous depth channel whose results arrive after a latency.
//!
//! Time is kept in integer microseconds. Events fall in the half-open
//! window `[0, duration)`. At equal timestamps a depth result lands before
//! a new depth job starts, and both happen before the detection tick.

use std::io::Write;
use std::ops::ControlFlow;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Mutex, RwLock};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detect::Detection;
use crate::monodepth::MonoDepthResult;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error("invalid schedule: {0}")]
    InvalidConfig(String),
    #[error("depth worker failed: {0}")]
    Worker(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverlapPolicy {
    /// A depth tick that finds the worker busy is skipped.
    #[default]
    Drop,
    /// The newest busy-time tick waits for the worker; older waiting
    /// ticks are replaced.
    QueueOne,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClockKind {
    #[default]
    Simulated,
    Real,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    /// Hz.
    pub detection_rate: f64,
    /// Hz.
    pub depth_rate: f64,
    /// Seconds from depth job start until its result is visible.
    pub depth_latency: f64,
    pub overlap_policy: OverlapPolicy,
    pub clock: ClockKind,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            detection_rate: 10.0,
            depth_rate: 0.1,
            depth_latency: 7.0,
            overlap_policy: OverlapPolicy::Drop,
            clock: ClockKind::Simulated,
        }
    }
}

pub(crate) fn secs_to_us(s: f64) -> i64 {
    (s * 1e6).round() as i64
}

pub(crate) fn us_to_secs(us: i64) -> f64 {
    us as f64 / 1e6
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        for (name, r) in [
            ("detection_rate", self.detection_rate),
            ("depth_rate", self.depth_rate),
        ] {
            if !(r > 0.0 && r.is_finite()) || secs_to_us(1.0 / r) < 1 {
                return Err(PipelineError::InvalidConfig(format!(
                    "{name} must be positive, got {r}"
                )));
            }
        }
        if !(self.depth_latency >= 0.0 && self.depth_latency.is_finite()) {
            return Err(PipelineError::InvalidConfig(format!(
                "depth_latency must be non-negative, got {}",
                self.depth_latency
            )));
        }
        Ok(())
    }

    pub fn detection_period(&self) -> f64 {
        1.0 / self.detection_rate
    }

    /// Largest depth staleness possible right after a detection tick once
    /// a depth result exists, under the drop policy with
    /// `depth_latency <= 1 / depth_rate`.
    pub fn staleness_bound(&self) -> f64 {
        1.0 / self.depth_rate + self.depth_latency
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    Detect,
    DepthStart,
    DepthReady,
}

impl Channel {
    /// Processing order among events sharing a timestamp.
    fn rank(self) -> u8 {
        match self {
            Channel::DepthReady => 0,
            Channel::DepthStart => 1,
            Channel::Detect => 2,
        }
    }
}

/// One scheduler event. `seq` is the snapshot number for detect events and
/// the 1-based depth job id for depth events.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub t: f64,
    pub ch: Channel,
    pub seq: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TickTrace {
    pub events: Vec<TraceEvent>,
}

impl TickTrace {
    pub fn count(&self, ch: Channel) -> usize {
        self.events.iter().filter(|e| e.ch == ch).count()
    }

    pub fn times(&self, ch: Channel) -> Vec<f64> {
        self.events
            .iter()
            .filter(|e| e.ch == ch)
            .map(|e| e.t)
            .collect()
    }

    /// One JSON object per line: `{"t":..,"ch":..,"seq":..}`.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for e in &self.events {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("JSON is UTF-8")
    }
}

/// Fused perception state handed to navigation after each detection tick.
#[derive(Debug, Clone, Default)]
pub struct PerceptionSnapshot {
    /// 1-based tick count; 0 is the empty snapshot before any tick.
    pub seq: u64,
    pub timestamp: f64,
    pub detections: Vec<Detection>,
    pub detections_timestamp: f64,
    pub depth: Option<Arc<MonoDepthResult>>,
    /// `timestamp - depth.capture_timestamp` when depth is present.
    pub depth_staleness: Option<f64>,
    /// Width in pixels of the image the detections refer to.
    pub frame_width: usize,
}

/// Single-writer, many-reader holder of the latest snapshot. Readers get
/// whole published snapshots only.
#[derive(Debug, Default)]
pub struct SnapshotBoard {
    current: RwLock<Arc<PerceptionSnapshot>>,
}

impl SnapshotBoard {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn latest(&self) -> Arc<PerceptionSnapshot> {
        self.current.read().expect("snapshot lock poisoned").clone()
    }

    pub fn publish(&self, snapshot: PerceptionSnapshot) -> Arc<PerceptionSnapshot> {
        let snap = Arc::new(snapshot);
        *self.current.write().expect("snapshot lock poisoned") = snap.clone();
        snap
    }
}

/// Output of one detection tick.
#[derive(Debug, Clone, Default)]
pub struct DetectOutput {
    pub detections: Vec<Detection>,
    pub frame_width: usize,
}

/// A captured depth job; runs on the depth worker.
pub struct DepthJob(pub Box<dyn FnOnce() -> MonoDepthResult + Send>);

impl DepthJob {
    pub fn new(f: impl FnOnce() -> MonoDepthResult + Send + 'static) -> Self {
        Self(Box::new(f))
    }
}

/// The world the scheduler drives. Called only from the fast loop.
pub trait World {
    /// Runs detection on the current frame at time `t`.
    fn detect(&mut self, t: f64) -> DetectOutput;
    /// Captures a frame at time `t` for the depth worker.
    fn depth_job(&mut self, t: f64) -> DepthJob;
    /// Consumes a freshly published snapshot. `Break` ends the run early.
    fn on_snapshot(&mut self, snapshot: &Arc<PerceptionSnapshot>) -> ControlFlow<()>;
}

#[derive(Debug, Clone, Default)]
pub struct RunReport {
    pub trace: TickTrace,
    /// Actual times of detection ticks (equal to the nominal ones under
    /// the simulated clock).
    pub tick_times: Vec<f64>,
    pub stopped_early: bool,
}

impl RunReport {
    /// `|interval - period|` for consecutive detection ticks.
    pub fn jitter(&self, period: f64) -> Vec<f64> {
        self.tick_times
            .windows(2)
            .map(|w| ((w[1] - w[0]) - period).abs())
            .collect()
    }
}

pub struct Pipeline {
    config: ScheduleConfig,
    board: Arc<SnapshotBoard>,
}

struct Pending {
    capture_us: i64,
    job: DepthJob,
}

impl Pipeline {
    pub fn new(config: ScheduleConfig) -> Result<Self, PipelineError> {
        config.validate()?;
        Ok(Self {
            config,
            board: Arc::new(SnapshotBoard::new()),
        })
    }

    pub fn config(&self) -> &ScheduleConfig {
        &self.config
    }

    pub fn board(&self) -> Arc<SnapshotBoard> {
        self.board.clone()
    }

    pub fn latest_snapshot(&self) -> Arc<PerceptionSnapshot> {
        self.board.latest()
    }

    pub fn run(&self, duration: f64, world: &mut dyn World) -> Result<RunReport, PipelineError> {
        if !(duration > 0.0 && duration.is_finite()) {
            return Err(PipelineError::InvalidConfig(format!(
                "duration must be positive, got {duration}"
            )));
        }
        match self.config.clock {
            ClockKind::Simulated => Ok(self.run_simulated(duration, world)),
            ClockKind::Real => self.run_real(duration, world),
        }
    }

    fn snapshot(
        &self,
        seq: u64,
        t: f64,
        out: DetectOutput,
        depth: &Option<Arc<MonoDepthResult>>,
    ) -> PerceptionSnapshot {
        PerceptionSnapshot {
            seq,
            timestamp: t,
            detections: out.detections,
            detections_timestamp: t,
            depth: depth.clone(),
            depth_staleness: depth.as_ref().map(|d| (t - d.capture_timestamp).max(0.0)),
            frame_width: out.frame_width,
        }
    }

    fn run_simulated(&self, duration: f64, world: &mut dyn World) -> RunReport {
        let cfg = &self.config;
        let end = secs_to_us(duration);
        let det_period = secs_to_us(1.0 / cfg.detection_rate);
        let depth_period = secs_to_us(1.0 / cfg.depth_rate);
        let latency = secs_to_us(cfg.depth_latency);

        let mut report = RunReport::default();
        let mut next_detect = 0i64;
        let mut next_depth_tick = 0i64;
        // (ready time, job id, result) of the job on the worker
        let mut in_flight: Option<(i64, u64, MonoDepthResult)> = None;
        let mut queued: Option<Pending> = None;
        let mut latest_depth: Option<Arc<MonoDepthResult>> = None;
        let mut job_id = 0u64;
        let mut seq = 0u64;

        let start_job = |at: i64,
                         pending: Pending,
                         trace: &mut TickTrace,
                         job_id: &mut u64|
         -> (i64, u64, MonoDepthResult) {
            *job_id += 1;
            trace.events.push(TraceEvent {
                t: us_to_secs(at),
                ch: Channel::DepthStart,
                seq: *job_id,
            });
            let mut result = (pending.job.0)();
            result.capture_timestamp = us_to_secs(pending.capture_us);
            result.ready_timestamp = us_to_secs(at + latency);
            (at + latency, *job_id, result)
        };

        loop {
            let ready_at = in_flight.as_ref().map(|(t, _, _)| *t);
            let candidates = [
                ready_at.map(|t| (t, Channel::DepthReady)),
                Some((next_depth_tick, Channel::DepthStart)),
                Some((next_detect, Channel::Detect)),
            ];
            let (t, ch) = candidates
                .into_iter()
                .flatten()
                .min_by_key(|(t, ch)| (*t, ch.rank()))
                .expect("non-empty");
            if t >= end {
                break;
            }
            match ch {
                Channel::DepthReady => {
                    let (_, id, result) = in_flight.take().expect("ready implies in flight");
                    report.trace.events.push(TraceEvent {
                        t: us_to_secs(t),
                        ch,
                        seq: id,
                    });
                    latest_depth = Some(Arc::new(result));
                    if let Some(p) = queued.take() {
                        in_flight = Some(start_job(t, p, &mut report.trace, &mut job_id));
                    }
                }
                Channel::DepthStart => {
                    next_depth_tick += depth_period;
                    let busy = in_flight.is_some();
                    if busy && cfg.overlap_policy == OverlapPolicy::Drop {
                        continue;
                    }
                    let pending = Pending {
                        capture_us: t,
                        job: world.depth_job(us_to_secs(t)),
                    };
                    if busy {
                        queued = Some(pending);
                    } else {
                        in_flight = Some(start_job(t, pending, &mut report.trace, &mut job_id));
                    }
                }
                Channel::Detect => {
                    next_detect += det_period;
                    seq += 1;
                    let ts = us_to_secs(t);
                    let out = world.detect(ts);
                    report.trace.events.push(TraceEvent { t: ts, ch, seq });
                    report.tick_times.push(ts);
                    let snap = self
                        .board
                        .publish(self.snapshot(seq, ts, out, &latest_depth));
                    if world.on_snapshot(&snap).is_break() {
                        report.stopped_early = true;
                        break;
                    }
                }
            }
        }
        report
    }

    fn run_real(&self, duration: f64, world: &mut dyn World) -> Result<RunReport, PipelineError> {
        let cfg = self.config;
        let end = secs_to_us(duration);
        let det_period = secs_to_us(1.0 / cfg.detection_rate);
        let depth_period = secs_to_us(1.0 / cfg.depth_rate);
        let latency = Duration::from_micros(secs_to_us(cfg.depth_latency) as u64);

        let origin = Instant::now();
        let elapsed_us = move || origin.elapsed().as_micros() as i64;
        let trace = Arc::new(Mutex::new(Vec::<TraceEvent>::new()));
        let latest: Arc<Mutex<Option<Arc<MonoDepthResult>>>> = Arc::new(Mutex::new(None));
        let busy = Arc::new(AtomicBool::new(false));
        let stop = Arc::new(AtomicBool::new(false));
        let (tx, rx) = mpsc::channel::<(u64, i64, DepthJob)>();

        let worker = {
            let trace = trace.clone();
            let latest = latest.clone();
            let busy = busy.clone();
            let stop = stop.clone();
            thread::Builder::new()
                .name("depth-worker".into())
                .spawn(move || {
                    while let Ok((id, capture_us, job)) = rx.recv() {
                        let started = Instant::now();
                        let mut result = (job.0)();
                        while started.elapsed() < latency && !stop.load(Ordering::Acquire) {
                            let remaining = latency.saturating_sub(started.elapsed());
                            thread::sleep(remaining.min(Duration::from_millis(5)));
                        }
                        let ready_us = elapsed_us();
                        result.capture_timestamp = us_to_secs(capture_us);
                        result.ready_timestamp = us_to_secs(ready_us);
                        if ready_us < end {
                            trace.lock().expect("trace lock").push(TraceEvent {
                                t: us_to_secs(ready_us),
                                ch: Channel::DepthReady,
                                seq: id,
                            });
                            *latest.lock().expect("depth lock") = Some(Arc::new(result));
                        }
                        busy.store(false, Ordering::Release);
                    }
                })
                .map_err(|e| PipelineError::Worker(e.to_string()))?
        };

        let mut report = RunReport::default();
        let mut next_detect = 0i64;
        let mut next_depth_tick = 0i64;
        let mut queued: Option<(i64, DepthJob)> = None;
        let mut job_id = 0u64;
        let mut seq = 0u64;
        let submit = |id: u64, capture_us: i64, job: DepthJob, trace: &Mutex<Vec<TraceEvent>>| {
            busy.store(true, Ordering::Release);
            trace.lock().expect("trace lock").push(TraceEvent {
                t: us_to_secs(elapsed_us()),
                ch: Channel::DepthStart,
                seq: id,
            });
            tx.send((id, capture_us, job)).is_ok()
        };

        loop {
            let (due, is_depth) = if next_depth_tick <= next_detect {
                (next_depth_tick, true)
            } else {
                (next_detect, false)
            };
            if due >= end {
                break;
            }
            let now = elapsed_us();
            if now < due {
                // a queued job may be started while waiting for the next deadline
                if queued.is_some() && !busy.load(Ordering::Acquire) {
                    let (capture_us, job) = queued.take().expect("checked");
                    job_id += 1;
                    submit(job_id, capture_us, job, &trace);
                }
                thread::sleep(Duration::from_micros((due - now).min(1000) as u64));
                continue;
            }
            if is_depth {
                next_depth_tick += depth_period;
                let is_busy = busy.load(Ordering::Acquire);
                if is_busy && cfg.overlap_policy == OverlapPolicy::Drop {
                    continue;
                }
                let job = world.depth_job(us_to_secs(due));
                if is_busy {
                    queued = Some((due, job));
                } else {
                    job_id += 1;
                    submit(job_id, due, job, &trace);
                }
            } else {
                next_detect += det_period;
                seq += 1;
                let tick = elapsed_us();
                let ts = us_to_secs(tick);
                let out = world.detect(ts);
                let depth = latest.lock().expect("depth lock").clone();
                trace.lock().expect("trace lock").push(TraceEvent {
                    t: ts,
                    ch: Channel::Detect,
                    seq,
                });
                report.tick_times.push(ts);
                let snap = self.board.publish(self.snapshot(seq, ts, out, &depth));
                if world.on_snapshot(&snap).is_break() {
                    report.stopped_early = true;
                    break;
                }
            }
        }
        stop.store(true, Ordering::Release);
        drop(tx);
        drop(queued);
        worker
            .join()
            .map_err(|_| PipelineError::Worker("depth worker panicked".into()))?;
        let mut events = std::mem::take(&mut *trace.lock().expect("trace lock"));
        events.sort_by(|a, b| a.t.total_cmp(&b.t).then(a.ch.rank().cmp(&b.ch.rank())));
        report.trace = TickTrace { events };
        Ok(report)
    }
}

/// Trace-only run with an empty world, for inspecting schedules.
pub fn trace_schedule(config: &ScheduleConfig, duration: f64) -> Result<TickTrace, PipelineError> {
    struct Idle;
    impl World for Idle {
        fn detect(&mut self, _t: f64) -> DetectOutput {
            DetectOutput::default()
        }
        fn depth_job(&mut self, t: f64) -> DepthJob {
            DepthJob::new(move || MonoDepthResult {
                depth: crate::raster::DepthMap::invalid(1, 1),
                capture_timestamp: t,
                ready_timestamp: t,
                backend_id: "none".into(),
            })
        }
        fn on_snapshot(&mut self, _s: &Arc<PerceptionSnapshot>) -> ControlFlow<()> {
            ControlFlow::Continue(())
        }
    }
    Ok(Pipeline::new(*config)?.run(duration, &mut Idle)?.trace)
}
