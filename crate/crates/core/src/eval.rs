//! Evaluation: banded depth error, navigation metrics, synthetic telemetry
//! and timestamped session logs with replay.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use image::GrayImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::detect::{iou, BBox, Detection};
use crate::io::{self as rio, IoError};
use crate::pipeline::PerceptionSnapshot;
use crate::raster::{DepthMap, Grid};
use crate::rover::{
    check_snapshot, DriveParams, ExecutionReport, PathPlan, PoseSample, RoverState, SafetyConfig,
    SafetyDecision,
};
use crate::scene::Hit;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("depth maps differ in size: {0:?} vs {1:?}")]
    DimensionMismatch((usize, usize), (usize, usize)),
    #[error("invalid band [{0}, {1}]")]
    InvalidBand(f64, f64),
    #[error("intended path is empty")]
    EmptyPolyline,
    #[error("trajectory is empty")]
    EmptyTrajectory,
    #[error("{kind} record at t={t} is older than the previous one at t={previous}")]
    OutOfOrder {
        kind: RecordKind,
        t: f64,
        previous: f64,
    },
    #[error("session log: {0}")]
    Log(String),
    #[error(transparent)]
    Io(#[from] IoError),
}

fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> EvalError + '_ {
    move |source| {
        EvalError::Io(IoError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

pub const DEFAULT_BAND: (f64, f64) = (0.15, 2.0);
pub const BIN_WIDTH: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthBin {
    pub center: f64,
    pub mae: Option<f64>,
    pub count: usize,
}

/// Depth error over ground truth inside `band`, edges inclusive. `mae` and
/// `rmse` are `None` when no pixel is valid in both maps within the band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthEvalReport {
    pub mae: Option<f64>,
    pub rmse: Option<f64>,
    /// Pixels used for the error statistics.
    pub count: usize,
    /// Fraction of in-band ground-truth pixels with a valid estimate.
    pub valid_fraction: Option<f64>,
    pub band: (f64, f64),
    pub bins: Vec<DepthBin>,
}

impl DepthEvalReport {
    pub fn is_empty(&self) -> bool {
        self.count == 0
    }
}

#[derive(Debug, Clone)]
struct DepthAccumulator {
    band: (f64, f64),
    abs_sum: f64,
    sq_sum: f64,
    count: usize,
    in_band: usize,
    bins: Vec<(f64, usize)>,
}

impl DepthAccumulator {
    fn new(band: (f64, f64)) -> Result<Self, EvalError> {
        let (lo, hi) = band;
        if !(lo.is_finite() && hi.is_finite() && lo >= 0.0 && hi > lo) {
            return Err(EvalError::InvalidBand(lo, hi));
        }
        let n = ((hi - lo) / BIN_WIDTH).ceil().max(1.0) as usize;
        Ok(Self {
            band,
            abs_sum: 0.0,
            sq_sum: 0.0,
            count: 0,
            in_band: 0,
            bins: vec![(0.0, 0); n],
        })
    }

    fn add(&mut self, estimate: &DepthMap, gt: &DepthMap) -> Result<(), EvalError> {
        let (a, b) = (
            (estimate.width(), estimate.height()),
            (gt.width(), gt.height()),
        );
        if a != b {
            return Err(EvalError::DimensionMismatch(a, b));
        }
        let (lo, hi) = self.band;
        let nbins = self.bins.len();
        let est = estimate.values().as_slice();
        for (i, &g) in gt.values().as_slice().iter().enumerate() {
            let g = g as f64;
            if !(g.is_finite() && g > 0.0 && g >= lo && g <= hi) {
                continue;
            }
            self.in_band += 1;
            let e = est[i] as f64;
            if !(e.is_finite() && e > 0.0) {
                continue;
            }
            let err = e - g;
            self.abs_sum += err.abs();
            self.sq_sum += err * err;
            self.count += 1;
            let bin = (((g - lo) / BIN_WIDTH) as usize).min(nbins - 1);
            self.bins[bin].0 += err.abs();
            self.bins[bin].1 += 1;
        }
        Ok(())
    }

    fn finish(self) -> DepthEvalReport {
        let (lo, hi) = self.band;
        let bins = self
            .bins
            .iter()
            .enumerate()
            .map(|(i, &(sum, n))| {
                let b0 = lo + i as f64 * BIN_WIDTH;
                let b1 = (b0 + BIN_WIDTH).min(hi);
                DepthBin {
                    center: (b0 + b1) / 2.0,
                    mae: (n > 0).then(|| sum / n as f64),
                    count: n,
                }
            })
            .collect();
        let n = self.count as f64;
        DepthEvalReport {
            mae: (self.count > 0).then(|| self.abs_sum / n),
            rmse: (self.count > 0).then(|| (self.sq_sum / n).sqrt()),
            count: self.count,
            valid_fraction: (self.in_band > 0).then(|| self.count as f64 / self.in_band as f64),
            band: self.band,
            bins,
        }
    }
}

/// Depth error of one estimate against ground truth, both in meters.
pub fn depth_mae(
    estimate: &DepthMap,
    gt: &DepthMap,
    band: (f64, f64),
) -> Result<DepthEvalReport, EvalError> {
    depth_mae_pooled([(estimate, gt)], band)
}

/// Pools the pixels of several frames into one report.
pub fn depth_mae_pooled<'a, I>(pairs: I, band: (f64, f64)) -> Result<DepthEvalReport, EvalError>
where
    I: IntoIterator<Item = (&'a DepthMap, &'a DepthMap)>,
{
    let mut acc = DepthAccumulator::new(band)?;
    for (e, g) in pairs {
        acc.add(e, g)?;
    }
    Ok(acc.finish())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NavReport {
    pub completion: bool,
    pub time_s: f64,
    /// Mean distance from trajectory samples to the intended polyline.
    pub path_deviation: f64,
    pub halt_count: usize,
}

/// Euclidean distance from `p` to the segment `a`-`b`.
pub fn point_segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (p.0 - (a.0 + t * dx)).hypot(p.1 - (a.1 + t * dy))
}

pub fn point_polyline_distance(p: (f64, f64), polyline: &[(f64, f64)]) -> f64 {
    match polyline {
        [] => f64::INFINITY,
        [only] => (p.0 - only.0).hypot(p.1 - only.1),
        _ => polyline
            .windows(2)
            .map(|s| point_segment_distance(p, s[0], s[1]))
            .fold(f64::INFINITY, f64::min),
    }
}

pub fn mean_deviation(
    trajectory: &[PoseSample],
    intended: &[(f64, f64)],
) -> Result<f64, EvalError> {
    if intended.is_empty() {
        return Err(EvalError::EmptyPolyline);
    }
    if trajectory.is_empty() {
        return Err(EvalError::EmptyTrajectory);
    }
    let sum: f64 = trajectory
        .iter()
        .map(|s| point_polyline_distance((s.x, s.y), intended))
        .sum();
    Ok(sum / trajectory.len() as f64)
}

pub fn nav_metrics(
    report: &ExecutionReport,
    intended: &[(f64, f64)],
) -> Result<NavReport, EvalError> {
    Ok(NavReport {
        completion: report.completed,
        time_s: report.elapsed,
        path_deviation: mean_deviation(&report.trajectory, intended)?,
        halt_count: report.halt_events.len(),
    })
}

/// Visible extent of one boulder in an image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Footprint {
    pub boulder_id: u32,
    pub bbox: BBox,
    pub pixels: usize,
    /// Median ground-truth depth of the visible pixels, meters.
    pub median_depth: f64,
}

/// Per-boulder footprints from a hit map and metric depth, in boulder id
/// order. Boulders without a single finite depth pixel are skipped.
pub fn boulder_footprints(hits: &Grid<Hit>, depth_m: &DepthMap) -> Vec<Footprint> {
    let mut acc: HashMap<u32, (usize, usize, usize, usize, Vec<f32>)> = HashMap::new();
    for y in 0..hits.height() {
        for x in 0..hits.width() {
            let Hit::Boulder(id) = *hits.get(x, y) else {
                continue;
            };
            let Some(z) = depth_m.get(x, y) else { continue };
            let e = acc.entry(id).or_insert((x, y, x, y, Vec::new()));
            e.0 = e.0.min(x);
            e.1 = e.1.min(y);
            e.2 = e.2.max(x);
            e.3 = e.3.max(y);
            e.4.push(z);
        }
    }
    let mut out: Vec<Footprint> = acc
        .into_iter()
        .map(|(id, (x0, y0, x1, y1, mut zs))| {
            zs.sort_by(f32::total_cmp);
            let n = zs.len();
            let median_depth = if n % 2 == 1 {
                zs[n / 2] as f64
            } else {
                0.5 * (zs[n / 2 - 1] as f64 + zs[n / 2] as f64)
            };
            Footprint {
                boulder_id: id,
                bbox: BBox::new(x0 as f64, y0 as f64, (x1 + 1) as f64, (y1 + 1) as f64),
                pixels: n,
                median_depth,
            }
        })
        .collect();
    out.sort_by_key(|f| f.boulder_id);
    out
}

/// Detection counts against ground-truth boxes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectionScore {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

impl DetectionScore {
    pub fn precision(&self) -> Option<f64> {
        let n = self.true_positives + self.false_positives;
        (n > 0).then(|| self.true_positives as f64 / n as f64)
    }

    pub fn recall(&self) -> Option<f64> {
        let n = self.true_positives + self.false_negatives;
        (n > 0).then(|| self.true_positives as f64 / n as f64)
    }
}

impl std::ops::AddAssign for DetectionScore {
    fn add_assign(&mut self, o: Self) {
        self.true_positives += o.true_positives;
        self.false_positives += o.false_positives;
        self.false_negatives += o.false_negatives;
    }
}

/// One-to-one matching, highest IoU pairs first; a pair counts only at
/// IoU >= `min_iou`.
pub fn score_detections(detections: &[Detection], truth: &[BBox], min_iou: f64) -> DetectionScore {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (i, d) in detections.iter().enumerate() {
        for (j, t) in truth.iter().enumerate() {
            let v = iou(&d.bbox, t);
            if v >= min_iou {
                pairs.push((v, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let (mut used_d, mut used_t) = (vec![false; detections.len()], vec![false; truth.len()]);
    let mut tp = 0;
    for (_, i, j) in pairs {
        if !used_d[i] && !used_t[j] {
            used_d[i] = true;
            used_t[j] = true;
            tp += 1;
        }
    }
    DetectionScore {
        true_positives: tp,
        false_positives: detections.len() - tp,
        false_negatives: truth.len() - tp,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Telemetry {
    pub timestamp: f64,
    pub cpu_load: f64,
    pub memory_mb: f64,
    /// Simulated; not a hardware reading.
    pub synthetic_temp_c: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TelemetryConfig {
    pub temp_band: (f64, f64),
    pub initial_temp_c: f64,
    /// Standard deviation of the temperature step per sample.
    pub temp_step: f64,
    pub seed: u64,
}

impl Default for TelemetryConfig {
    fn default() -> Self {
        Self {
            temp_band: (40.0, 65.0),
            initial_temp_c: 42.0,
            temp_step: 0.05,
            seed: 0,
        }
    }
}

/// Seeded random walks for the telemetry readout. Every field is
/// synthetic so that logged runs stay reproducible.
#[derive(Debug, Clone)]
pub struct TelemetryGenerator {
    config: TelemetryConfig,
    rng: ChaCha8Rng,
    temp: f64,
    cpu: f64,
    memory: f64,
}

impl TelemetryGenerator {
    pub fn new(config: TelemetryConfig) -> Self {
        let (lo, hi) = config.temp_band;
        Self {
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x7E1E),
            temp: config.initial_temp_c.clamp(lo, hi),
            cpu: 0.35,
            memory: 310.0,
            config,
        }
    }

    pub fn sample(&mut self, timestamp: f64) -> Telemetry {
        let unit = Normal::new(0.0, 1.0).expect("unit normal");
        let (lo, hi) = self.config.temp_band;
        self.temp = (self.temp + self.config.temp_step * unit.sample(&mut self.rng)).clamp(lo, hi);
        self.cpu = (self.cpu + 0.02 * unit.sample(&mut self.rng)).clamp(0.05, 0.95);
        self.memory = (self.memory + 0.5 * unit.sample(&mut self.rng)).clamp(200.0, 600.0);
        Telemetry {
            timestamp,
            cpu_load: self.cpu,
            memory_mb: self.memory,
            synthetic_temp_c: self.temp,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    Rgb,
    Depth,
    Detections,
    Telemetry,
    Pose,
}

impl std::fmt::Display for RecordKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            RecordKind::Rgb => "rgb",
            RecordKind::Depth => "depth",
            RecordKind::Detections => "detections",
            RecordKind::Telemetry => "telemetry",
            RecordKind::Pose => "pose",
        };
        f.write_str(s)
    }
}

/// One thing to log.
#[derive(Debug, Clone, Copy)]
pub enum Record<'a> {
    Rgb {
        t: f64,
        image: &'a GrayImage,
    },
    Depth {
        t: f64,
        estimate: &'a DepthMap,
        ground_truth: Option<&'a DepthMap>,
    },
    Detections {
        t: f64,
        frame_width: usize,
        detections: &'a [Detection],
    },
    Telemetry(&'a Telemetry),
    Pose {
        t: f64,
        state: &'a RoverState,
    },
}

impl Record<'_> {
    pub fn kind(&self) -> RecordKind {
        match self {
            Record::Rgb { .. } => RecordKind::Rgb,
            Record::Depth { .. } => RecordKind::Depth,
            Record::Detections { .. } => RecordKind::Detections,
            Record::Telemetry(_) => RecordKind::Telemetry,
            Record::Pose { .. } => RecordKind::Pose,
        }
    }

    pub fn timestamp(&self) -> f64 {
        match self {
            Record::Rgb { t, .. }
            | Record::Depth { t, .. }
            | Record::Detections { t, .. }
            | Record::Pose { t, .. } => *t,
            Record::Telemetry(tel) => tel.timestamp,
        }
    }
}

/// One row of `events.jsonl`. File-backed records carry paths relative to
/// the run directory in `refs`; the rest carry their payload in `data`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRow {
    pub t: f64,
    pub kind: RecordKind,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub refs: Vec<String>,
    #[serde(default, skip_serializing_if = "Value::is_null")]
    pub data: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub t: f64,
    pub kind: RecordKind,
    /// Line number in `events.jsonl`, from 0.
    pub line: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub refs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionIndex {
    pub run_id: String,
    #[serde(default)]
    pub meta: serde_json::Map<String, Value>,
    pub records: Vec<IndexEntry>,
}

struct LoggerInner {
    events: BufWriter<File>,
    index: SessionIndex,
    last_t: HashMap<RecordKind, f64>,
    file_seq: usize,
}

/// Append-only session log under `<root>/<run_id>/`.
pub struct SessionLogger {
    dir: PathBuf,
    inner: Mutex<LoggerInner>,
}

impl std::fmt::Debug for SessionLogger {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SessionLogger")
            .field("dir", &self.dir)
            .finish()
    }
}

impl SessionLogger {
    /// Creates the run directory and an index with zero records.
    pub fn create(root: &Path, run_id: &str) -> Result<Self, EvalError> {
        if run_id.is_empty() || run_id.contains(['/', '\\']) || run_id == "." || run_id == ".." {
            return Err(EvalError::Log(format!("invalid run id {run_id:?}")));
        }
        let dir = root.join(run_id);
        for sub in ["rgb", "depth"] {
            let p = dir.join(sub);
            fs::create_dir_all(&p).map_err(io_error(&p))?;
        }
        let events_path = dir.join("events.jsonl");
        let events = File::create(&events_path).map_err(io_error(&events_path))?;
        let logger = Self {
            inner: Mutex::new(LoggerInner {
                events: BufWriter::new(events),
                index: SessionIndex {
                    run_id: run_id.to_string(),
                    meta: Default::default(),
                    records: Vec::new(),
                },
                last_t: HashMap::new(),
                file_seq: 0,
            }),
            dir,
        };
        logger.write_index()?;
        Ok(logger)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn set_meta(&self, key: &str, value: Value) {
        let mut inner = self.inner.lock().expect("logger lock");
        inner.index.meta.insert(key.to_string(), value);
    }

    pub fn log(&self, record: Record<'_>) -> Result<(), EvalError> {
        let kind = record.kind();
        let t = record.timestamp();
        let mut inner = self.inner.lock().expect("logger lock");
        if let Some(&previous) = inner.last_t.get(&kind) {
            if t < previous {
                return Err(EvalError::OutOfOrder { kind, t, previous });
            }
        }
        let mut refs = Vec::new();
        let data = match record {
            Record::Rgb { image, .. } => {
                inner.file_seq += 1;
                let rel = format!("rgb/{:06}.png", inner.file_seq);
                rio::write_png(&self.dir.join(&rel), image)?;
                refs.push(rel);
                Value::Null
            }
            Record::Depth {
                estimate,
                ground_truth,
                ..
            } => {
                inner.file_seq += 1;
                let rel = format!("depth/{:06}_est.pfm", inner.file_seq);
                rio::write_depth_pfm(&self.dir.join(&rel), estimate)?;
                refs.push(rel);
                if let Some(gt) = ground_truth {
                    let rel = format!("depth/{:06}_gt.pfm", inner.file_seq);
                    rio::write_depth_pfm(&self.dir.join(&rel), gt)?;
                    refs.push(rel);
                }
                Value::Null
            }
            Record::Detections {
                frame_width,
                detections,
                ..
            } => serde_json::json!({ "frame_width": frame_width, "detections": detections }),
            Record::Telemetry(tel) => serde_json::to_value(tel).expect("plain struct"),
            Record::Pose { state, .. } => {
                serde_json::to_value(PoseSample::of(t, state)).expect("plain struct")
            }
        };
        let row = EventRow {
            t,
            kind,
            refs,
            data,
        };
        let line = inner.index.records.len();
        let text = serde_json::to_string(&row).expect("event row");
        let path = self.dir.join("events.jsonl");
        writeln!(inner.events, "{text}").map_err(io_error(&path))?;
        inner.index.records.push(IndexEntry {
            t,
            kind,
            line,
            refs: row.refs,
        });
        inner.last_t.insert(kind, t);
        Ok(())
    }

    fn write_index(&self) -> Result<(), EvalError> {
        let inner = self.inner.lock().expect("logger lock");
        let path = self.dir.join("index.json");
        let text = serde_json::to_string_pretty(&inner.index).expect("index");
        fs::write(&path, text).map_err(io_error(&path))
    }

    /// Flushes the event stream and rewrites the index.
    pub fn flush(&self) -> Result<(), EvalError> {
        {
            let mut inner = self.inner.lock().expect("logger lock");
            let path = self.dir.join("events.jsonl");
            inner.events.flush().map_err(io_error(&path))?;
        }
        self.write_index()
    }

    pub fn finish(self) -> Result<PathBuf, EvalError> {
        self.flush()?;
        Ok(self.dir)
    }
}

/// A session read back from disk.
#[derive(Debug, Clone)]
pub struct SessionLog {
    pub dir: PathBuf,
    pub index: SessionIndex,
    pub events: Vec<EventRow>,
}

impl SessionLog {
    pub fn load(dir: &Path) -> Result<Self, EvalError> {
        let index_path = dir.join("index.json");
        let text = fs::read_to_string(&index_path).map_err(io_error(&index_path))?;
        let index: SessionIndex = serde_json::from_str(&text)
            .map_err(|e| EvalError::Log(format!("{}: {e}", index_path.display())))?;
        let events_path = dir.join("events.jsonl");
        let f = File::open(&events_path).map_err(io_error(&events_path))?;
        let mut events = Vec::new();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(io_error(&events_path))?;
            if line.trim().is_empty() {
                continue;
            }
            events.push(
                serde_json::from_str(&line)
                    .map_err(|e| EvalError::Log(format!("events.jsonl line {}: {e}", i + 1)))?,
            );
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            index,
            events,
        })
    }

    pub fn of_kind(&self, kind: RecordKind) -> impl Iterator<Item = &EventRow> {
        self.events.iter().filter(move |e| e.kind == kind)
    }

    fn meta<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<T, EvalError> {
        let v = self
            .index
            .meta
            .get(key)
            .ok_or_else(|| EvalError::Log(format!("index.json has no '{key}' metadata")))?;
        serde_json::from_value(v.clone())
            .map_err(|e| EvalError::Log(format!("metadata '{key}': {e}")))
    }

    pub fn trajectory(&self) -> Result<Vec<PoseSample>, EvalError> {
        self.of_kind(RecordKind::Pose)
            .map(|e| {
                serde_json::from_value(e.data.clone())
                    .map_err(|err| EvalError::Log(format!("pose row: {err}")))
            })
            .collect()
    }

    /// Navigation metrics rebuilt from the log: the trajectory from pose
    /// rows, halts by replaying logged detections through the safety gate.
    pub fn replay_nav(&self) -> Result<NavReport, EvalError> {
        let plan: PathPlan = self.meta("plan")?;
        let start: RoverState = self.meta("start")?;
        let drive: DriveParams = self.meta("drive")?;
        let safety: SafetyConfig = self.meta("safety")?;
        let elapsed: f64 = self.meta("elapsed")?;
        let intended = plan.intended_polyline(&start, &drive, INTENDED_RESOLUTION);
        let trajectory = self.trajectory()?;
        let mut latched = false;
        let mut halt_count = 0;
        for e in self.of_kind(RecordKind::Detections) {
            if latched {
                break;
            }
            let snapshot = PerceptionSnapshot {
                timestamp: e.t,
                detections: serde_json::from_value(e.data["detections"].clone())
                    .map_err(|err| EvalError::Log(format!("detections row: {err}")))?,
                frame_width: e.data["frame_width"].as_u64().unwrap_or(0) as usize,
                ..Default::default()
            };
            if let SafetyDecision::Halt(_) = check_snapshot(&snapshot, &safety) {
                latched = true;
                halt_count += 1;
            }
        }
        let completion = !latched && elapsed >= plan.total_duration() - 1e-9;
        Ok(NavReport {
            completion,
            time_s: elapsed,
            path_deviation: mean_deviation(&trajectory, &intended)?,
            halt_count,
        })
    }

    /// Pooled depth error over every logged depth record that carries
    /// ground truth.
    pub fn replay_depth(&self, band: (f64, f64)) -> Result<DepthEvalReport, EvalError> {
        let mut pairs = Vec::new();
        for e in self.of_kind(RecordKind::Depth) {
            if let [est, gt] = e.refs.as_slice() {
                pairs.push((
                    rio::read_depth_pfm(&self.dir.join(est))?,
                    rio::read_depth_pfm(&self.dir.join(gt))?,
                ));
            }
        }
        depth_mae_pooled(pairs.iter().map(|(a, b)| (a, b)), band)
    }
}

/// Sampling step, in seconds of plan time, for intended polylines.
pub const INTENDED_RESOLUTION: f64 = 0.01;
