//! Acceptance suite: one pass/fail line per criterion, nonzero exit if any
//! criterion fails. Run with `cargo test -p rover-service --test acceptance`.

use std::ops::ControlFlow;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use image::{GrayImage, Luma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rover_core::detect::{detect, iou, nms, BBox, Detection, OBSTACLE_LABEL};
use rover_core::eval::{boulder_footprints, score_detections, DetectionScore};
use rover_core::geometry::{
    depth_from_disparity, disparity_from_depth, focal_from_fov, CameraIntrinsics, CameraPose,
    StereoRig,
};
use rover_core::monodepth::MonoDepthResult;
use rover_core::noise::value_noise2;
use rover_core::pipeline::{
    trace_schedule, Channel, ClockKind, DepthJob, DetectOutput, PerceptionSnapshot, Pipeline,
    ScheduleConfig, World,
};
use rover_core::raster::{DepthMap, Grid};
use rover_core::rover::RoverState;
use rover_core::scene::{
    generate_terrain, place_boulders_in, render_depth, render_stereo, Boulder, Hit, Region,
    SceneDescription, StereoFrame, TextureParams,
};
use rover_core::sim::{courses, obstacle_depth_m, Simulation};
use rover_core::stereo::{aggregate_paths, compute_depth, CostVolume, SgmParams, DIRECTIONS};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn camera_constants() -> Outcome {
    let f = focal_from_fov(60.0, 500).map_err(|e| e.to_string())?;
    let rig = StereoRig::preset_500px();
    ensure((f - 433.0).abs() <= 0.05, || format!("focal {f:.4} px"))?;
    ensure(rig.focal_px() == f, || {
        format!("preset rig focal {}", rig.focal_px())
    })?;
    Ok(format!("focal {f:.4} px"))
}

fn depth_formula() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    let mut rig = StereoRig::preset_500px();
    for i in 0..1_000_000u32 {
        if i % 1000 == 0 {
            let w = rng.random_range(16..4096);
            let k = CameraIntrinsics::new(w, w, rng.random_range(5.0..170.0))
                .map_err(|e| e.to_string())?;
            let baseline = 10f64.powf(rng.random_range(-3.0..3.0));
            rig = StereoRig::new(k, baseline).map_err(|e| e.to_string())?;
        }
        let d = 10f64.powf(rng.random_range(-2.0..3.5));
        let z = depth_from_disparity(&rig, d).map_err(|e| e.to_string())?;
        let back = disparity_from_depth(&rig, z).map_err(|e| e.to_string())?;
        worst = worst.max(((back - d) / d).abs());
    }
    ensure(worst < 1e-9, || format!("worst relative error {worst:e}"))?;
    Ok(format!("worst relative error {worst:.2e} over 1e6 triples"))
}

/// Per-pixel scanline DP: walk back to the border along `dir`, then run the
/// recurrence forward in signed 64-bit arithmetic.
fn naive_direction(c: &CostVolume, dir: (isize, isize), p1: i64, p2: i64) -> Vec<i64> {
    let (w, h, nd) = (c.width() as isize, c.height() as isize, c.num_disparities());
    let mut out = vec![0i64; (w * h) as usize * nd];
    for y in 0..h {
        for x in 0..w {
            let mut path = vec![(x, y)];
            let (mut px, mut py) = (x - dir.0, y - dir.1);
            while px >= 0 && py >= 0 && px < w && py < h {
                path.push((px, py));
                px -= dir.0;
                py -= dir.1;
            }
            path.reverse();
            let cost =
                |(px, py): (isize, isize), d: usize| c.get(px as usize, py as usize, d) as i64;
            let mut l: Vec<i64> = (0..nd).map(|d| cost(path[0], d)).collect();
            for &q in &path[1..] {
                let m = *l.iter().min().unwrap();
                l = (0..nd)
                    .map(|d| {
                        let mut best = l[d].min(m + p2);
                        if d > 0 {
                            best = best.min(l[d - 1] + p1);
                        }
                        if d + 1 < nd {
                            best = best.min(l[d + 1] + p1);
                        }
                        cost(q, d) + best - m
                    })
                    .collect();
            }
            let base = (y * w + x) as usize * nd;
            out[base..base + nd].copy_from_slice(&l);
        }
    }
    out
}

fn sgm_oracle() -> Outcome {
    for seed in 0..1000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
        let (w, h, nd) = (
            rng.random_range(1..=6),
            rng.random_range(1..=6),
            rng.random_range(1..=8),
        );
        let max = rng.random_range(1..=30u16);
        let vol = CostVolume::new(
            w,
            h,
            nd,
            (0..w * h * nd).map(|_| rng.random_range(0..=max)).collect(),
        );
        let p1 = rng.random_range(1..20u16);
        let p2 = rng.random_range(p1 + 1..=100u16);
        let paths = if rng.random_bool(0.5) { 4 } else { 8 };
        let mut expected = vec![0i64; vol.as_slice().len()];
        for &dir in &DIRECTIONS[..paths] {
            for (s, v) in expected
                .iter_mut()
                .zip(naive_direction(&vol, dir, p1 as i64, p2 as i64))
            {
                *s += v;
            }
        }
        let params = SgmParams {
            p1,
            p2,
            num_paths: paths,
            ..Default::default()
        };
        let got: Vec<i64> = aggregate_paths(&vol, &params)
            .map_err(|e| e.to_string())?
            .as_slice()
            .iter()
            .map(|&v| v as i64)
            .collect();
        ensure(got == expected, || {
            format!("volume {seed} ({w}x{h}x{nd}, {paths} paths) differs")
        })?;
    }
    Ok("1000 volumes equal exactly".into())
}

fn texture(w: u32, h: u32, seed: u64) -> GrayImage {
    GrayImage::from_fn(w, h, |x, y| {
        let (fx, fy) = (x as f64, y as f64);
        let v = 0.6 * value_noise2(seed, fx / 2.3, fy / 2.3)
            + 0.4 * value_noise2(seed + 1, fx / 6.1, fy / 6.1);
        Luma([(v * 255.0).round().clamp(0.0, 255.0) as u8])
    })
}

fn shift_recovery() -> Outcome {
    let rig = StereoRig::new(CameraIntrinsics::new(256, 256, 60.0).unwrap(), 24.0).unwrap();
    let mut notes = Vec::new();
    for s in [4u32, 10, 16, 31] {
        let wide = texture(256 + s, 256, 7);
        let frame = StereoFrame {
            left: GrayImage::from_fn(256, 256, |x, y| *wide.get_pixel(x, y)),
            right: GrayImage::from_fn(256, 256, |x, y| *wide.get_pixel(x + s, y)),
            gt_depth_left: DepthMap::invalid(256, 256),
            left_hits: Grid::filled(256, 256, Hit::Terrain),
            timestamp: 0.0,
            rig_pose: CameraPose::new([0.0, 0.0, 1.0], 0.0, 0.0),
        };
        let (disp, _) =
            compute_depth(&rig, &frame, &SgmParams::default()).map_err(|e| e.to_string())?;
        let margin = 4usize;
        let (mut valid, mut close) = (0usize, 0usize);
        for y in margin..256 - margin {
            for x in s as usize + margin..256 - margin {
                if let Some(d) = disp.get(x, y) {
                    valid += 1;
                    close += ((d - s as f32).abs() <= 0.5) as usize;
                }
            }
        }
        let frac = close as f64 / valid.max(1) as f64;
        ensure(valid > 0 && frac >= 0.95, || {
            format!("s={s}: {:.1}% of {valid}", 100.0 * frac)
        })?;
        notes.push(format!("s={s} {:.1}%", 100.0 * frac));
    }
    Ok(notes.join(", "))
}

/// Boulder field under the 500 px preset rig in millimetre scene units,
/// viewed from 0.25 m up and pitched 20 degrees down.
fn mae_frame(seed: u64) -> (StereoRig, StereoFrame) {
    let terrain = generate_terrain(seed, (4000.0, 4000.0), 20.0, 30.0).unwrap();
    let region = Region {
        min: [550.0, -700.0],
        max: [1800.0, 700.0],
    };
    let boulders = place_boulders_in(&terrain, seed, 6, (40.0, 120.0), region);
    let scene = SceneDescription::new(terrain, boulders, [0.3, 0.2, 0.9], 0.8)
        .unwrap()
        .with_texture(TextureParams {
            amplitude: 0.7,
            scale: 8.0,
        });
    let rig = StereoRig::preset_500px()
        .with_units_per_meter(1000.0)
        .unwrap();
    let ground = scene.terrain.height_at(0.0, 0.0).unwrap();
    let pose = CameraPose::new([0.0, 0.0, ground + 250.0], 0.0, 20f64.to_radians());
    let frame = render_stereo(&scene, &rig, &pose).unwrap();
    (rig, frame)
}

fn synthetic_mae() -> Outcome {
    let mut notes = Vec::new();
    let mut worst = (0.0f64, 1.0f64);
    for seed in 1..=5u64 {
        let (rig, frame) = mae_frame(seed);
        let (_, depth) =
            compute_depth(&rig, &frame, &SgmParams::default()).map_err(|e| e.to_string())?;
        let upm = rig.units_per_meter();
        let (mut n, mut valid, mut sum) = (0usize, 0usize, 0.0f64);
        for y in 0..frame.gt_depth_left.height() {
            for x in 0..frame.gt_depth_left.width() {
                let Some(gt) = frame.gt_depth_left.get(x, y) else {
                    continue;
                };
                let gt = gt as f64 / upm;
                if !(0.15..=2.0).contains(&gt) {
                    continue;
                }
                n += 1;
                if let Some(e) = depth.get(x, y) {
                    valid += 1;
                    sum += (e as f64 / upm - gt).abs();
                }
            }
        }
        let (mae, frac) = (sum / valid.max(1) as f64, valid as f64 / n.max(1) as f64);
        ensure(n > 10_000, || format!("seed {seed}: only {n} px in band"))?;
        ensure(mae <= 0.05 && frac >= 0.7, || {
            format!("seed {seed}: MAE {mae:.4} m, valid {frac:.3}")
        })?;
        worst = (worst.0.max(mae), worst.1.min(frac));
        notes.push(format!("{mae:.4}"));
    }
    Ok(format!(
        "MAE per seed [{}] m, worst valid fraction {:.3}",
        notes.join(", "),
        worst.1
    ))
}

/// Stamps detections with the tick time; optionally spins in depth jobs.
#[derive(Default)]
struct Recorder {
    snapshots: Vec<Arc<PerceptionSnapshot>>,
    job_work: Option<Duration>,
}

impl World for Recorder {
    fn detect(&mut self, _t: f64) -> DetectOutput {
        DetectOutput {
            detections: Vec::new(),
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
            MonoDepthResult {
                depth: DepthMap::invalid(2, 2),
                capture_timestamp: t,
                ready_timestamp: t,
                backend_id: "acceptance".into(),
            }
        })
    }

    fn on_snapshot(&mut self, snapshot: &Arc<PerceptionSnapshot>) -> ControlFlow<()> {
        self.snapshots.push(snapshot.clone());
        ControlFlow::Continue(())
    }
}

fn scheduler_trace() -> Outcome {
    let cfg = ScheduleConfig::default();
    let trace = trace_schedule(&cfg, 30.0).map_err(|e| e.to_string())?;
    let detect = trace.count(Channel::Detect);
    let starts = trace.times(Channel::DepthStart);
    let readies = trace.times(Channel::DepthReady);
    ensure(detect == 300, || format!("{detect} detect ticks"))?;
    ensure(starts == [0.0, 10.0, 20.0], || {
        format!("depth_start {starts:?}")
    })?;
    ensure(readies == [7.0, 17.0, 27.0], || {
        format!("depth_ready {readies:?}")
    })?;
    let mut rec = Recorder::default();
    Pipeline::new(cfg)
        .unwrap()
        .run(30.0, &mut rec)
        .map_err(|e| e.to_string())?;
    let max = rec
        .snapshots
        .iter()
        .filter_map(|s| s.depth_staleness)
        .fold(0.0, f64::max);
    ensure(rec.snapshots.len() == 300 && max <= 17.0, || {
        format!("max staleness {max}")
    })?;
    Ok(format!(
        "300 ticks, starts {starts:?}, readies {readies:?}, max staleness {max} s"
    ))
}

fn wall_clock_jitter() -> Outcome {
    let cfg = ScheduleConfig {
        clock: ClockKind::Real,
        ..Default::default()
    };
    let period = 1.0 / cfg.detection_rate;
    let mut rec = Recorder {
        job_work: Some(Duration::from_secs_f64(cfg.depth_latency)),
        ..Default::default()
    };
    let report = Pipeline::new(cfg)
        .unwrap()
        .run(10.0, &mut rec)
        .map_err(|e| e.to_string())?;
    let mut jitter = report.jitter(period);
    jitter.sort_by(f64::total_cmp);
    let p95 = jitter[(jitter.len() as f64 * 0.95).ceil() as usize - 1];
    ensure(report.tick_times.len() == 100, || {
        format!("{} ticks", report.tick_times.len())
    })?;
    ensure(report.trace.count(Channel::DepthStart) >= 1, || {
        "depth worker never started".into()
    })?;
    ensure(p95 < 0.2 * period, || {
        format!("p95 jitter {:.2} ms", p95 * 1e3)
    })?;
    Ok(format!(
        "p95 jitter {:.3} ms over {} intervals",
        p95 * 1e3,
        jitter.len()
    ))
}

fn ref_iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let area = |r: [f64; 4]| (r[2] - r[0]).max(0.0) * (r[3] - r[1]).max(0.0);
    let iw = a[2].min(b[2]) - a[0].max(b[0]);
    let ih = a[3].min(b[3]) - a[1].max(b[1]);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    inter / (area(a) + area(b) - inter)
}

/// Suppression-matrix NMS over all pairwise IoUs.
fn reference_nms(dets: &[Detection], thr: f64) -> Vec<Detection> {
    let n = dets.len();
    let mut rank: Vec<usize> = (0..n).collect();
    rank.sort_by(|&i, &j| {
        let (a, b) = (&dets[i], &dets[j]);
        b.confidence
            .total_cmp(&a.confidence)
            .then(a.bbox.x_min.total_cmp(&b.bbox.x_min))
            .then(a.bbox.y_min.total_cmp(&b.bbox.y_min))
    });
    let boxes: Vec<[f64; 4]> = dets.iter().map(|d| d.bbox.into()).collect();
    let mut suppressed = vec![false; n];
    let mut out = Vec::new();
    for (pos, &i) in rank.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        out.push(dets[i].clone());
        for &j in &rank[pos + 1..] {
            if ref_iou(boxes[i], boxes[j]) > thr {
                suppressed[j] = true;
            }
        }
    }
    out
}

fn nms_equivalence() -> Outcome {
    let thr = 0.2;
    let mut kept = 0;
    for seed in 0..1000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4E_45);
        let dets: Vec<Detection> = (0..rng.random_range(0..40))
            .map(|_| {
                let (x, y) = (
                    rng.random_range(0..60) as f64,
                    rng.random_range(0..60) as f64,
                );
                let (w, h) = (
                    rng.random_range(1..25) as f64,
                    rng.random_range(1..25) as f64,
                );
                Detection {
                    bbox: BBox::new(x, y, x + w, y + h),
                    confidence: rng.random_range(0..8) as f64 / 8.0,
                    range_m: None,
                    label: OBSTACLE_LABEL.into(),
                    source_timestamp: 0.0,
                }
            })
            .collect();
        let got = nms(&dets, thr);
        ensure(got == reference_nms(&dets, thr), || {
            format!("set {seed} differs")
        })?;
        for (i, a) in got.iter().enumerate() {
            for b in &got[i + 1..] {
                ensure(iou(&a.bbox, &b.bbox) <= thr, || {
                    format!("set {seed}: kept pair above threshold")
                })?;
            }
        }
        kept += got.len();
    }
    Ok(format!("1000 sets equal, {kept} boxes kept"))
}

fn inside(b: &Boulder, x: f64, y: f64) -> bool {
    ((x - b.center[0]) / b.radii[0]).powi(2) + ((y - b.center[1]) / b.radii[1]).powi(2) <= 1.0
}

fn halt_safety() -> Outcome {
    let (mut halts, mut contacts, mut completed, mut worst_dev) = (0, 0, 0, 0.0f64);
    for seed in 0..20u64 {
        let c = courses::blocked(seed);
        let cfg = &c.config;
        let step = cfg.rover.wheel_speed / cfg.schedule.detection_rate;
        ensure(
            step < cfg.safety.stop_range && cfg.safety.stop_range == 0.5,
            || {
                format!(
                    "course {seed}: wheel_speed*dt {step} vs stop_range {}",
                    cfg.safety.stop_range
                )
            },
        )?;
        let out = Simulation::with_scene(c.config.clone(), c.scene.clone())
            .and_then(|s| s.run(&c.plan, None))
            .map_err(|e| e.to_string())?;
        let touched = out.report.trajectory.windows(2).any(|w| {
            (0..=20).any(|k| {
                let f = k as f64 / 20.0;
                let (x, y) = (
                    w[0].x + f * (w[1].x - w[0].x),
                    w[0].y + f * (w[1].y - w[0].y),
                );
                c.scene.boulders.iter().any(|b| inside(b, x, y))
            })
        });
        contacts += touched as usize;
        halts += (!out.report.completed && out.report.halt_events.len() == 1 && !touched) as usize;
    }
    for seed in 0..20u64 {
        let c = courses::clear(seed);
        let out = Simulation::with_scene(c.config.clone(), c.scene.clone())
            .and_then(|s| s.run(&c.plan, None))
            .map_err(|e| e.to_string())?;
        completed += (out.report.completed && out.report.halt_events.is_empty()) as usize;
        worst_dev = worst_dev.max(out.nav.path_deviation);
    }
    ensure(contacts == 0, || format!("{contacts} collisions"))?;
    ensure(halts == 20, || format!("{halts}/20 halted before contact"))?;
    ensure(completed == 20, || {
        format!("{completed}/20 clear courses completed")
    })?;
    ensure(worst_dev < 0.02, || {
        format!("path deviation {worst_dev:.4} m")
    })?;
    Ok(format!(
        "20/20 halted, 0 collisions, 20/20 completed, max deviation {worst_dev:.2e} m"
    ))
}

fn precision_recall() -> Outcome {
    let mut total = DetectionScore::default();
    let mut frames = 0;
    for seed in 0..20u64 {
        let c = courses::blocked(seed);
        let cfg = &c.config;
        let k = cfg.rig.intrinsics().map_err(|e| e.to_string())?;
        let route = c
            .plan
            .intended_polyline(&cfg.rover.start_state(), &cfg.rover.drive(), 0.05);
        for w in route.windows(2).step_by(2) {
            let heading = (w[1].1 - w[0].1).atan2(w[1].0 - w[0].0);
            let pose = cfg
                .rig
                .pose(&c.scene, &RoverState::at(w[0].0, w[0].1, heading));
            let (depth, hits) = render_depth(&c.scene, &k, &pose).map_err(|e| e.to_string())?;
            let near = obstacle_depth_m(&depth, &hits, cfg.rig.units_per_meter);
            let truth: Vec<BBox> = boulder_footprints(&hits, &near)
                .into_iter()
                .filter(|f| {
                    f.median_depth < cfg.detector.near_threshold
                        && f.pixels >= cfg.detector.min_area
                })
                .map(|f| f.bbox)
                .collect();
            total += score_detections(&detect(&near, &cfg.detector, 0.0), &truth, 0.3);
            frames += 1;
        }
    }
    let (p, r) = (
        total.precision().unwrap_or(0.0),
        total.recall().unwrap_or(0.0),
    );
    ensure(total.true_positives > 100, || {
        format!("only {} matched boulders", total.true_positives)
    })?;
    ensure(p >= 0.9 && r >= 0.9, || {
        format!("precision {p:.3}, recall {r:.3} ({total:?})")
    })?;
    Ok(format!(
        "precision {p:.3}, recall {r:.3} over {frames} frames ({} TP, {} FP, {} FN)",
        total.true_positives, total.false_positives, total.false_negatives
    ))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let run = |id: &str| -> Result<Vec<u8>, String> {
        let out = Command::new(env!("CARGO_BIN_EXE_rover"))
            .args([
                "simulate", "--course", "blocked", "--seed", "7", "--run-id", id, "--out",
            ])
            .arg(dir.path())
            .env("RUST_LOG", "warn")
            .output()
            .map_err(|e| e.to_string())?;
        ensure(out.status.success(), || {
            String::from_utf8_lossy(&out.stderr).into_owned()
        })?;
        std::fs::read(dir.path().join(id).join("events.jsonl")).map_err(|e| e.to_string())
    };
    let (a, b) = (run("a")?, run("b")?);
    ensure(!a.is_empty() && a == b, || {
        "events.jsonl differs between runs".into()
    })?;
    Ok(format!("events.jsonl identical ({} bytes)", a.len()))
}

fn main() {
    let criteria: [Criterion; 11] = [
        ("camera constants", camera_constants),
        ("depth formula round trip", depth_formula),
        ("SGM oracle equivalence", sgm_oracle),
        ("shift recovery", shift_recovery),
        ("synthetic depth MAE", synthetic_mae),
        ("scheduler trace", scheduler_trace),
        ("wall-clock non-blocking", wall_clock_jitter),
        ("NMS equivalence", nms_equivalence),
        ("halt safety", halt_safety),
        ("detector precision/recall", precision_recall),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail} [{secs:.1} s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail} [{secs:.1} s]");
            }
        }
    }
    println!(
        "{} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
