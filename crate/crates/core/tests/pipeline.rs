use std::ops::ControlFlow;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rover_core::detect::{BBox, Detection};
use rover_core::monodepth::MonoDepthResult;
use rover_core::pipeline::{
    trace_schedule, Channel, ClockKind, DepthJob, DetectOutput, OverlapPolicy, PerceptionSnapshot,
    Pipeline, ScheduleConfig, World,
};
use rover_core::raster::DepthMap;

/// Expected depth start and ready times in microseconds, written as a
/// plain sweep over depth ticks and job completions.
fn oracle_depth_times(cfg: &ScheduleConfig, duration: f64) -> (Vec<i64>, Vec<i64>) {
    let end = (duration * 1e6).round() as i64;
    let period = (1e6 / cfg.depth_rate).round() as i64;
    let latency = (cfg.depth_latency * 1e6).round() as i64;
    let (mut starts, mut readies) = (Vec::new(), Vec::new());
    let mut busy_until: Option<i64> = None;
    let mut queued = false;
    let mut tick = 0i64;
    loop {
        // finish every job that completes no later than this tick
        while let Some(r) = busy_until {
            if r > tick || r >= end {
                break;
            }
            readies.push(r);
            busy_until = None;
            if queued {
                queued = false;
                starts.push(r);
                busy_until = Some(r + latency);
            }
        }
        if tick >= end {
            break;
        }
        match busy_until {
            None => {
                starts.push(tick);
                busy_until = Some(tick + latency);
            }
            Some(_) if cfg.overlap_policy == OverlapPolicy::QueueOne => queued = true,
            Some(_) => {}
        }
        tick += period;
    }
    (starts, readies)
}

fn us(times: Vec<f64>) -> Vec<i64> {
    times
        .into_iter()
        .map(|t| (t * 1e6).round() as i64)
        .collect()
}

#[test]
fn simulated_trace_matches_oracle_on_random_schedules() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..300 {
        let cfg = ScheduleConfig {
            detection_rate: [5.0, 10.0, 20.0, 30.0][rng.random_range(0..4)],
            depth_rate: [0.05, 0.1, 0.25, 0.5, 1.0][rng.random_range(0..5)],
            depth_latency: rng.random_range(0..30) as f64 * 0.5,
            overlap_policy: if rng.random_bool(0.5) {
                OverlapPolicy::Drop
            } else {
                OverlapPolicy::QueueOne
            },
            clock: ClockKind::Simulated,
        };
        let duration = rng.random_range(1..120) as f64 * 0.5;
        let trace = trace_schedule(&cfg, duration).unwrap();
        let (starts, readies) = oracle_depth_times(&cfg, duration);
        assert_eq!(
            us(trace.times(Channel::DepthStart)),
            starts,
            "case {case}: {cfg:?} {duration}"
        );
        assert_eq!(
            us(trace.times(Channel::DepthReady)),
            readies,
            "case {case}: {cfg:?} {duration}"
        );
        let period_us = (1e6 / cfg.detection_rate).round() as i64;
        let end_us = (duration * 1e6).round() as i64;
        let expected_ticks: Vec<i64> = (0..)
            .map(|k| k * period_us)
            .take_while(|&t| t < end_us)
            .collect();
        assert_eq!(
            us(trace.times(Channel::Detect)),
            expected_ticks,
            "case {case}"
        );
        assert!(trace.events.windows(2).all(|w| w[0].t <= w[1].t));
    }
}

#[test]
fn identical_configs_give_identical_traces() {
    let cfg = ScheduleConfig {
        depth_latency: 12.0,
        overlap_policy: OverlapPolicy::QueueOne,
        ..Default::default()
    };
    assert_eq!(
        trace_schedule(&cfg, 100.0).unwrap(),
        trace_schedule(&cfg, 100.0).unwrap()
    );
}

fn depth_result(t: f64) -> MonoDepthResult {
    MonoDepthResult {
        depth: DepthMap::invalid(2, 2),
        capture_timestamp: t,
        ready_timestamp: t,
        backend_id: "test".into(),
    }
}

/// Emits one detection stamped with the tick time and records snapshots.
#[derive(Default)]
struct Recorder {
    snapshots: Vec<Arc<PerceptionSnapshot>>,
    job_work: Option<Duration>,
}

impl World for Recorder {
    fn detect(&mut self, t: f64) -> DetectOutput {
        DetectOutput {
            detections: vec![Detection {
                bbox: BBox::new(0.0, 0.0, 1.0, 1.0),
                confidence: 1.0,
                range_m: Some(t),
                label: "obstacle".into(),
                source_timestamp: t,
            }],
            frame_width: 8,
        }
    }

    fn depth_job(&mut self, t: f64) -> DepthJob {
        let work = self.job_work;
        DepthJob::new(move || {
            if let Some(work) = work {
                let start = Instant::now();
                while start.elapsed() < work {
                    std::hint::spin_loop();
                }
            }
            depth_result(t)
        })
    }

    fn on_snapshot(&mut self, snapshot: &Arc<PerceptionSnapshot>) -> ControlFlow<()> {
        self.snapshots.push(snapshot.clone());
        ControlFlow::Continue(())
    }
}

#[test]
fn staleness_stays_within_bound() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let depth_rate = [0.1, 0.2, 0.5, 1.0][rng.random_range(0..4)];
        let cfg = ScheduleConfig {
            depth_rate,
            depth_latency: rng.random_range(0.0..=1.0 / depth_rate),
            ..Default::default()
        };
        let pipeline = Pipeline::new(cfg).unwrap();
        let mut rec = Recorder::default();
        pipeline.run(60.0, &mut rec).unwrap();
        for s in &rec.snapshots {
            if let Some(st) = s.depth_staleness {
                assert!(
                    st >= 0.0 && st <= cfg.staleness_bound() + 1e-9,
                    "{st} > {}",
                    cfg.staleness_bound()
                );
            }
        }
    }
}

#[test]
fn default_snapshots_at_six_and_eight_seconds() {
    let pipeline = Pipeline::new(ScheduleConfig::default()).unwrap();
    let mut rec = Recorder::default();
    pipeline.run(30.0, &mut rec).unwrap();
    let at = |t: f64| {
        rec.snapshots
            .iter()
            .find(|s| (s.timestamp - t).abs() < 1e-9)
            .unwrap()
    };
    assert!(at(6.0).depth.is_none());
    assert_eq!(at(8.0).depth_staleness, Some(8.0));
    let max = rec
        .snapshots
        .iter()
        .filter_map(|s| s.depth_staleness)
        .fold(0.0, f64::max);
    assert!(max <= 17.0);
    assert_eq!(rec.snapshots.len(), 300);
    assert!(rec
        .snapshots
        .iter()
        .enumerate()
        .all(|(i, s)| s.seq == i as u64 + 1));
    assert_eq!(pipeline.latest_snapshot().seq, 300);
}

#[test]
fn empty_snapshot_before_first_tick() {
    let pipeline = Pipeline::new(ScheduleConfig::default()).unwrap();
    let s = pipeline.latest_snapshot();
    assert_eq!(s.seq, 0);
    assert!(s.detections.is_empty() && s.depth.is_none());
}

/// A reader hammers the board while a long simulated run publishes; every
/// observed snapshot must be whole.
#[test]
fn readers_never_see_torn_snapshots() {
    let cfg = ScheduleConfig {
        detection_rate: 100.0,
        depth_rate: 1.0,
        depth_latency: 0.5,
        ..Default::default()
    };
    let pipeline = Pipeline::new(cfg).unwrap();
    let board = pipeline.board();
    let done = Arc::new(AtomicBool::new(false));
    let reader = {
        let done = done.clone();
        thread::spawn(move || {
            let (mut reads, mut last_seq) = (0u64, 0u64);
            while !done.load(Ordering::Acquire) {
                let s = board.latest();
                if s.seq > 0 {
                    let expected_seq = (s.timestamp * 100.0).round() as u64 + 1;
                    assert_eq!(s.seq, expected_seq);
                    assert_eq!(s.detections.len(), 1);
                    assert_eq!(s.detections[0].source_timestamp, s.timestamp);
                    assert_eq!(s.detections_timestamp, s.timestamp);
                    if let (Some(d), Some(st)) = (&s.depth, s.depth_staleness) {
                        assert!((s.timestamp - d.capture_timestamp - st).abs() < 1e-9);
                    }
                }
                assert!(s.seq >= last_seq, "seq went backwards");
                last_seq = s.seq;
                reads += 1;
            }
            reads
        })
    };
    let mut rec = Recorder::default();
    pipeline.run(1000.0, &mut rec).unwrap();
    done.store(true, Ordering::Release);
    let reads = reader.join().unwrap();
    assert!(reads > 0);
    assert_eq!(rec.snapshots.len(), 100_000);
}

/// Shortened wall-clock check: a depth job spinning for its whole latency
/// must not disturb the detection cadence.
#[test]
fn real_clock_ticks_ignore_busy_worker() {
    let cfg = ScheduleConfig {
        detection_rate: 10.0,
        depth_rate: 0.5,
        depth_latency: 1.5,
        clock: ClockKind::Real,
        ..Default::default()
    };
    let pipeline = Pipeline::new(cfg).unwrap();
    let mut rec = Recorder {
        job_work: Some(Duration::from_millis(1500)),
        ..Default::default()
    };
    let report = pipeline.run(3.0, &mut rec).unwrap();
    assert_eq!(report.tick_times.len(), 30);
    let mut jitter = report.jitter(0.1);
    jitter.sort_by(f64::total_cmp);
    let p95 = jitter[(jitter.len() as f64 * 0.95).ceil() as usize - 1];
    assert!(p95 < 0.02, "p95 jitter {p95}");
    assert_eq!(report.trace.count(Channel::DepthStart), 2);
    assert!(rec.snapshots.iter().any(|s| s.depth.is_some()));
}
