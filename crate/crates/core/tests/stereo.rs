use image::{GrayImage, Luma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rover_core::geometry::{disparity_from_depth, CameraIntrinsics, CameraPose, StereoRig};
use rover_core::noise::value_noise2;
use rover_core::raster::{DepthMap, Grid};
use rover_core::scene::{
    generate_terrain, render_stereo, Boulder, Hit, SceneDescription, StereoFrame, TextureParams,
};
use rover_core::stereo::{
    aggregate_direction, aggregate_paths, build_cost_volume, census_transform, compute_depth,
    match_stereo, select_disparity_with, total_variation, CostVolume, SgmParams, DIRECTIONS,
};

/// Plain recursion along one direction: for every pixel, walk back to the
/// border and run the scanline DP forward. Signed 64-bit arithmetic.
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
                let next: Vec<i64> = (0..nd)
                    .map(|d| {
                        let mut best = l[d];
                        if d > 0 {
                            best = best.min(l[d - 1] + p1);
                        }
                        if d + 1 < nd {
                            best = best.min(l[d + 1] + p1);
                        }
                        best = best.min(m + p2);
                        cost(q, d) + best - m
                    })
                    .collect();
                l = next;
            }
            let base = (y * w + x) as usize * nd;
            out[base..base + nd].copy_from_slice(&l);
        }
    }
    out
}

fn random_volume(rng: &mut ChaCha8Rng) -> CostVolume {
    let w = rng.random_range(1..=6);
    let h = rng.random_range(1..=6);
    let nd = rng.random_range(1..=8);
    let max = rng.random_range(1..=24u16);
    let costs = (0..w * h * nd).map(|_| rng.random_range(0..=max)).collect();
    CostVolume::new(w, h, nd, costs)
}

#[test]
fn aggregation_matches_naive_dp_on_random_volumes() {
    for seed in 0..1000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vol = random_volume(&mut rng);
        let p1 = rng.random_range(1..20u16);
        let p2 = rng.random_range(p1 + 1..=80u16);
        let paths = if rng.random_bool(0.5) { 4 } else { 8 };
        let params = SgmParams {
            p1,
            p2,
            num_paths: paths,
            ..Default::default()
        };
        let mut expected_sum = vec![0i64; vol.as_slice().len()];
        for &dir in &DIRECTIONS[..paths] {
            let naive = naive_direction(&vol, dir, p1 as i64, p2 as i64);
            let fast: Vec<i64> = aggregate_direction(&vol, dir, p1, p2)
                .as_slice()
                .iter()
                .map(|&v| v as i64)
                .collect();
            assert_eq!(fast, naive, "seed {seed} dir {dir:?}");
            for (s, v) in expected_sum.iter_mut().zip(&naive) {
                *s += v;
            }
        }
        let got: Vec<i64> = aggregate_paths(&vol, &params)
            .unwrap()
            .as_slice()
            .iter()
            .map(|&v| v as i64)
            .collect();
        assert_eq!(got, expected_sum, "seed {seed}");
    }
}

fn texture(w: u32, h: u32, seed: u64) -> GrayImage {
    GrayImage::from_fn(w, h, |x, y| {
        let (fx, fy) = (x as f64, y as f64);
        let v = 0.6 * value_noise2(seed, fx / 2.3, fy / 2.3)
            + 0.4 * value_noise2(seed + 1, fx / 6.1, fy / 6.1);
        Luma([(v * 255.0).round().clamp(0.0, 255.0) as u8])
    })
}

/// `right(x) = left(x + s)`, so every left pixel sits `s` px to the left in
/// the right image. Right pixels near the far edge use fresh texture.
fn shifted_pair(w: u32, h: u32, s: u32, seed: u64) -> (GrayImage, GrayImage) {
    let wide = texture(w + s, h, seed);
    let left = GrayImage::from_fn(w, h, |x, y| *wide.get_pixel(x, y));
    let right = GrayImage::from_fn(w, h, |x, y| *wide.get_pixel(x + s, y));
    (left, right)
}

#[test]
fn shift_recovery_end_to_end() {
    let rig = StereoRig::new(CameraIntrinsics::new(256, 256, 60.0).unwrap(), 24.0).unwrap();
    let params = SgmParams::default();
    for s in [4u32, 10, 16, 31] {
        let (left, right) = shifted_pair(256, 256, s, 7);
        let frame = StereoFrame {
            left,
            right,
            gt_depth_left: DepthMap::invalid(256, 256),
            left_hits: Grid::filled(256, 256, Hit::Terrain),
            timestamp: 0.0,
            rig_pose: CameraPose::new([0.0, 0.0, 1.0], 0.0, 0.0),
        };
        let (disp, depth) = compute_depth(&rig, &frame, &params).unwrap();
        let margin = 4usize;
        let (mut valid, mut close) = (0, 0);
        for y in margin..256 - margin {
            for x in s as usize + margin..256 - margin {
                if let Some(d) = disp.get(x, y) {
                    valid += 1;
                    if (d - s as f32).abs() <= 0.5 {
                        close += 1;
                        let z = depth.get(x, y).unwrap() as f64;
                        assert!((z - rig.focal_px() * 24.0 / d as f64).abs() < 1e-3 * z);
                    }
                }
            }
        }
        let frac = close as f64 / valid as f64;
        assert!(valid > 20_000, "s={s}: only {valid} valid");
        assert!(frac >= 0.95, "s={s}: {frac}");
    }
}

#[test]
fn matching_is_deterministic() {
    let (l, r) = shifted_pair(96, 64, 9, 3);
    let p = SgmParams {
        num_disparities: 32,
        ..Default::default()
    };
    let a = match_stereo(&l, &r, &p).unwrap();
    let b = match_stereo(&l, &r, &p).unwrap();
    let bits = |m: &rover_core::raster::DisparityMap| {
        m.values()
            .as_slice()
            .iter()
            .map(|v| v.to_bits())
            .collect::<Vec<_>>()
    };
    assert_eq!(bits(&a), bits(&b));
}

/// A boulder standing in front of a textured wall. Background pixels just
/// left of the boulder are visible to the left camera only; the LR check
/// should carve out a band about as wide as the disparity jump.
#[test]
fn occlusion_band_width_tracks_disparity_jump() {
    let terrain = generate_terrain(3, (4000.0, 4000.0), 40.0, 0.0).unwrap();
    let wall = 600.0;
    let boulder = Boulder {
        id: 0,
        center: [0.0, 0.0, wall - 200.0],
        radii: [60.0, 60.0, 60.0],
    };
    let scene = SceneDescription::new(terrain, vec![boulder], [0.0, 0.0, 1.0], 0.8)
        .unwrap()
        .with_texture(TextureParams {
            amplitude: 0.7,
            scale: 6.0,
        });
    let rig = StereoRig::new(CameraIntrinsics::new(160, 120, 60.0).unwrap(), 24.0).unwrap();
    // looking straight down: the ground is a fronto-parallel wall at `wall`
    let pose = CameraPose::new([0.0, 12.0, wall], 0.0, std::f64::consts::FRAC_PI_2);
    let frame = render_stereo(&scene, &rig, &pose).unwrap();
    let params = SgmParams {
        num_disparities: 64,
        speckle_window: 0,
        ..Default::default()
    };
    let (disp, _) = compute_depth(&rig, &frame, &params).unwrap();

    let d_bg = disparity_from_depth(&rig, wall).unwrap();
    let mut widths = Vec::new();
    let mut jumps = Vec::new();
    for y in 0..120 {
        let row: Vec<Hit> = (0..160).map(|x| *frame.left_hits.get(x, y)).collect();
        let Some(edge) = row.iter().position(|h| matches!(h, Hit::Boulder(_))) else {
            continue;
        };
        if edge < 30 {
            continue;
        }
        let z_edge = frame.gt_depth_left.get(edge, y).unwrap() as f64;
        let jump = disparity_from_depth(&rig, z_edge).unwrap() - d_bg;
        let mut band = 0;
        let mut x = edge;
        while x > 0 && disp.get(x - 1, y).is_none() {
            band += 1;
            x -= 1;
        }
        widths.push(band as f64);
        jumps.push(jump);
    }
    assert!(
        widths.len() > 20,
        "boulder visible on {} rows",
        widths.len()
    );
    let mean_w = widths.iter().sum::<f64>() / widths.len() as f64;
    let mean_j = jumps.iter().sum::<f64>() / jumps.len() as f64;
    assert!(mean_j > 5.0);
    assert!(
        (mean_w - mean_j).abs() <= 0.35 * mean_j + 1.5,
        "band {mean_w:.2} vs jump {mean_j:.2}"
    );
}

fn noisy_volume(seed: u64, noise: i32) -> CostVolume {
    let (l, r) = shifted_pair(80, 48, 6, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noisy = GrayImage::from_fn(80, 48, |x, y| {
        let v = r.get_pixel(x, y)[0] as i32 + rng.random_range(-noise..=noise);
        Luma([v.clamp(0, 255) as u8])
    });
    let cl = census_transform(&l, (5, 5)).unwrap();
    let cr = census_transform(&noisy, (5, 5)).unwrap();
    build_cost_volume(&cl, &cr, 16).unwrap()
}

fn tv_at(vol: &CostVolume, p2: u16) -> f64 {
    let params = SgmParams {
        p1: 8,
        p2,
        num_paths: 8,
        ..Default::default()
    };
    total_variation(&select_disparity_with(
        &aggregate_paths(vol, &params).unwrap(),
        None,
    ))
}

/// Strong smoothing beats weak smoothing on every fixed cost volume.
#[test]
fn large_p2_has_lower_total_variation_than_small_p2() {
    for noise in [0, 20, 40, 80] {
        for seed in 0..10u64 {
            let vol = noisy_volume(seed, noise);
            let (weak, strong) = (tv_at(&vol, 16), tv_at(&vol, 256));
            assert!(
                strong < weak,
                "noise {noise} seed {seed}: {weak} -> {strong}"
            );
        }
    }
}

/// Pins a cost volume on which one P2 increment raises the total
/// variation. Per-direction minima are summed, not a global energy, so
/// the sweep is not monotone step by step.
#[test]
fn p2_sweep_is_not_stepwise_monotone() {
    let vol = noisy_volume(0, 40);
    let (at48, at64) = (tv_at(&vol, 48), tv_at(&vol, 64));
    assert!(at64 > at48, "{at48} -> {at64}");
}
