use image::GrayImage;
use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{SceneDescription, SceneError};
use crate::geometry::{CameraIntrinsics, CameraPose, Ray, StereoRig};
use crate::noise::value_noise3;
use crate::raster::{DepthMap, Grid};

/// What a pixel's central ray hit first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Hit {
    Sky,
    Terrain,
    Boulder(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderOptions {
    /// Supersampling grid per pixel axis for image intensities.
    pub samples_per_axis: usize,
    /// Ambient light fraction in `[0, 1]`.
    pub ambient: f64,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            samples_per_axis: 2,
            ambient: 0.3,
        }
    }
}

/// One rendered camera view.
#[derive(Debug, Clone)]
pub struct ViewRender {
    pub image: GrayImage,
    /// Optical-axis depth of the nearest hit, `+inf` for sky.
    pub depth: DepthMap,
    pub hits: Grid<Hit>,
}

#[derive(Debug, Clone)]
pub struct StereoFrame {
    pub left: GrayImage,
    pub right: GrayImage,
    /// Optical-axis depth seen by the left camera, scene units, `+inf` for sky.
    pub gt_depth_left: DepthMap,
    /// Per-pixel hit classification of the left view.
    pub left_hits: Grid<Hit>,
    pub timestamp: f64,
    /// Pose of the left camera.
    pub rig_pose: CameraPose,
}

impl StereoFrame {
    pub fn at(mut self, timestamp: f64) -> Self {
        self.timestamp = timestamp;
        self
    }
}

struct SurfaceHit {
    hit: Hit,
    point: Vector3<f64>,
    normal: Vector3<f64>,
}

fn trace(scene: &SceneDescription, ray: &Ray) -> Option<SurfaceHit> {
    let mut best: Option<(f64, Hit)> = None;
    for b in &scene.boulders {
        if let Some(t) = b.intersect(&ray.origin, &ray.direction) {
            if best.is_none_or(|(bt, _)| t < bt) {
                best = Some((t, Hit::Boulder(b.id)));
            }
        }
    }
    let t_max = best.map_or(f64::INFINITY, |(t, _)| t);
    if let Some(t) = scene.terrain.intersect(ray, t_max) {
        if t < t_max {
            best = Some((t, Hit::Terrain));
        }
    }
    let (t, hit) = best?;
    let point = ray.at(t);
    let normal = match hit {
        Hit::Terrain => scene.terrain.normal_at(point.x, point.y),
        Hit::Boulder(id) => scene
            .boulders
            .iter()
            .find(|b| b.id == id)
            .map(|b| b.normal_at(&point))
            .unwrap_or_else(Vector3::z),
        Hit::Sky => unreachable!(),
    };
    Some(SurfaceHit { hit, point, normal })
}

fn texture(scene: &SceneDescription, p: &Vector3<f64>) -> f64 {
    let s = scene.texture.scale;
    let seed = scene.texture_seed;
    let n = value_noise3(seed, p.x / s, p.y / s, p.z / s)
        + 0.5 * value_noise3(seed ^ 1, 2.0 * p.x / s, 2.0 * p.y / s, 2.0 * p.z / s)
        + 0.25 * value_noise3(seed ^ 2, 4.0 * p.x / s, 4.0 * p.y / s, 4.0 * p.z / s);
    let amp = scene.texture.amplitude;
    1.0 - amp + amp * n / 1.75
}

fn shade(scene: &SceneDescription, opts: &RenderOptions, h: &SurfaceHit) -> f64 {
    let lambert = h.normal.dot(&scene.sun_direction).max(0.0);
    scene.albedo * texture(scene, &h.point) * (opts.ambient + (1.0 - opts.ambient) * lambert)
}

fn to_u8(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

fn check_camera(scene: &SceneDescription, pose: &CameraPose) -> Result<(), SceneError> {
    let [x, y, z] = pose.position;
    match scene.terrain.height_at(x, y) {
        Some(h) if z <= h => Err(SceneError::CameraBelowSurface(pose.position)),
        _ => Ok(()),
    }
}

fn camera_ray(k: &CameraIntrinsics, pose: &CameraPose, u: f64, v: f64) -> Ray {
    let dir = Vector3::new(u - k.cx(), v - k.cy(), k.focal_px());
    Ray::new(pose.origin(), pose.to_world(&dir))
}

fn render_rows(
    scene: &SceneDescription,
    k: &CameraIntrinsics,
    pose: &CameraPose,
    opts: &RenderOptions,
    shading: bool,
) -> (Vec<u8>, Vec<f32>, Vec<Hit>) {
    let (w, h) = (k.width(), k.height());
    let n = opts.samples_per_axis.max(1);
    let offsets: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64 - 0.5).collect();
    let forward = pose.forward();
    let rows: Vec<(Vec<u8>, Vec<f32>, Vec<Hit>)> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut pix = Vec::with_capacity(w);
            let mut depth = Vec::with_capacity(w);
            let mut hits = Vec::with_capacity(w);
            for x in 0..w {
                let center = trace(scene, &camera_ray(k, pose, x as f64, y as f64));
                match &center {
                    Some(sh) => {
                        depth.push(((sh.point - pose.origin()).dot(&forward)) as f32);
                        hits.push(sh.hit);
                    }
                    None => {
                        depth.push(f32::INFINITY);
                        hits.push(Hit::Sky);
                    }
                }
                if !shading {
                    continue;
                }
                let value = if n == 1 {
                    center.as_ref().map_or(0.0, |sh| shade(scene, opts, sh))
                } else {
                    let mut acc = 0.0;
                    for oy in &offsets {
                        for ox in &offsets {
                            let ray = camera_ray(k, pose, x as f64 + ox, y as f64 + oy);
                            if let Some(sh) = trace(scene, &ray) {
                                acc += shade(scene, opts, &sh);
                            }
                        }
                    }
                    acc / (n * n) as f64
                };
                pix.push(to_u8(value));
            }
            (pix, depth, hits)
        })
        .collect();
    let mut pix = Vec::with_capacity(w * h);
    let mut depth = Vec::with_capacity(w * h);
    let mut hits = Vec::with_capacity(w * h);
    for (p, d, hh) in rows {
        pix.extend(p);
        depth.extend(d);
        hits.extend(hh);
    }
    (pix, depth, hits)
}

/// Renders one camera: shaded 8-bit intensities, ground-truth depth and
/// per-pixel hit classes. Sky pixels are black with infinite depth.
pub fn render_view(
    scene: &SceneDescription,
    k: &CameraIntrinsics,
    pose: &CameraPose,
    opts: &RenderOptions,
) -> Result<ViewRender, SceneError> {
    check_camera(scene, pose)?;
    let (pix, depth, hits) = render_rows(scene, k, pose, opts, true);
    let (w, h) = (k.width(), k.height());
    Ok(ViewRender {
        image: GrayImage::from_raw(w as u32, h as u32, pix).expect("buffer sized to image"),
        depth: DepthMap::new(Grid::from_vec(w, h, depth)),
        hits: Grid::from_vec(w, h, hits),
    })
}

/// Depth and hit classes only, one ray per pixel. Used by the fast
/// perception channel.
pub fn render_depth(
    scene: &SceneDescription,
    k: &CameraIntrinsics,
    pose: &CameraPose,
) -> Result<(DepthMap, Grid<Hit>), SceneError> {
    check_camera(scene, pose)?;
    let (_, depth, hits) = render_rows(scene, k, pose, &RenderOptions::default(), false);
    let (w, h) = (k.width(), k.height());
    Ok((
        DepthMap::new(Grid::from_vec(w, h, depth)),
        Grid::from_vec(w, h, hits),
    ))
}

pub fn render_stereo(
    scene: &SceneDescription,
    rig: &StereoRig,
    pose: &CameraPose,
) -> Result<StereoFrame, SceneError> {
    render_stereo_with(scene, rig, pose, &RenderOptions::default())
}

pub fn render_stereo_with(
    scene: &SceneDescription,
    rig: &StereoRig,
    pose: &CameraPose,
    opts: &RenderOptions,
) -> Result<StereoFrame, SceneError> {
    let right_pose = pose.right_camera(rig.baseline());
    check_camera(scene, &right_pose)?;
    let left = render_view(scene, rig.intrinsics(), pose, opts)?;
    let right = render_view(scene, rig.intrinsics(), &right_pose, opts)?;
    Ok(StereoFrame {
        left: left.image,
        right: right.image,
        gt_depth_left: left.depth,
        left_hits: left.hits,
        timestamp: 0.0,
        rig_pose: *pose,
    })
}
