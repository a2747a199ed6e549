//! Pinhole stereo camera model.
//!
//! Conventions: camera frame is x right, y down, z forward (optical axis).
//! The world frame is z up; the rover drives in the xy plane. Pixel
//! centers sit at integer coordinates, so the default principal point of a
//! `w x h` image is `((w - 1) / 2, (h - 1) / 2)`.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("field of view {0} deg outside (0, 180)")]
    InvalidFov(f64),
    #[error("image dimension {0} px must be at least 2")]
    InvalidDimension(usize),
    #[error("non-positive disparity {0}")]
    NonPositiveDisparity(f64),
    #[error("non-positive depth {0}")]
    NonPositiveDepth(f64),
    #[error("baseline must be positive and finite, got {0}")]
    InvalidBaseline(f64),
    #[error("units_per_meter must be positive and finite, got {0}")]
    InvalidScale(f64),
    #[error("pixel ({u}, {v}) outside {width}x{height} image")]
    PixelOutOfBounds {
        u: f64,
        v: f64,
        width: usize,
        height: usize,
    },
    #[error("vertical field of view {given} deg inconsistent with square pixels ({implied} deg)")]
    InconsistentFov { given: f64, implied: f64 },
}

/// Focal length in pixels for a horizontal field of view spread over `width_px`.
pub fn focal_from_fov(fov_deg: f64, width_px: usize) -> Result<f64, GeometryError> {
    if !(fov_deg > 0.0 && fov_deg < 180.0) {
        return Err(GeometryError::InvalidFov(fov_deg));
    }
    if width_px < 2 {
        return Err(GeometryError::InvalidDimension(width_px));
    }
    // cot(a/2) = (1 + cos a) / sin a, exact at a = 90 degrees
    let (s, c) = fov_deg.to_radians().sin_cos();
    Ok((width_px as f64 / 2.0) * (1.0 + c) / s)
}

/// Intrinsics shared by both cameras of the rig. Pixels are square, so a
/// single focal length serves both axes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "IntrinsicsConfig", into = "IntrinsicsConfig")]
pub struct CameraIntrinsics {
    width_px: usize,
    height_px: usize,
    fov_h_deg: f64,
    fov_v_deg: f64,
    focal_px: f64,
    cx_px: f64,
    cy_px: f64,
}

/// Serialized form of [`CameraIntrinsics`]; derived quantities are optional.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IntrinsicsConfig {
    pub width_px: usize,
    pub height_px: usize,
    pub fov_h_deg: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fov_v_deg: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub focal_px: Option<f64>,
}

impl TryFrom<IntrinsicsConfig> for CameraIntrinsics {
    type Error = GeometryError;

    fn try_from(c: IntrinsicsConfig) -> Result<Self, Self::Error> {
        let k = CameraIntrinsics::new(c.width_px, c.height_px, c.fov_h_deg)?;
        if let Some(fv) = c.fov_v_deg {
            if (fv - k.fov_v_deg).abs() > 0.5 {
                return Err(GeometryError::InconsistentFov {
                    given: fv,
                    implied: k.fov_v_deg,
                });
            }
        }
        if let Some(f) = c.focal_px {
            // stored focal lengths must agree with the field of view
            if (f - k.focal_px).abs() > 0.5 {
                return Err(GeometryError::InvalidFov(c.fov_h_deg));
            }
        }
        Ok(k)
    }
}

impl From<CameraIntrinsics> for IntrinsicsConfig {
    fn from(k: CameraIntrinsics) -> Self {
        Self {
            width_px: k.width_px,
            height_px: k.height_px,
            fov_h_deg: k.fov_h_deg,
            fov_v_deg: Some(k.fov_v_deg),
            focal_px: Some(k.focal_px),
        }
    }
}

impl CameraIntrinsics {
    /// Builds intrinsics from a horizontal field of view, principal point at
    /// the image center.
    pub fn new(width_px: usize, height_px: usize, fov_h_deg: f64) -> Result<Self, GeometryError> {
        if height_px < 2 {
            return Err(GeometryError::InvalidDimension(height_px));
        }
        let focal_px = focal_from_fov(fov_h_deg, width_px)?;
        let fov_v_deg = 2.0 * ((height_px as f64 / 2.0) / focal_px).atan().to_degrees();
        Ok(Self {
            width_px,
            height_px,
            fov_h_deg,
            fov_v_deg,
            focal_px,
            cx_px: (width_px as f64 - 1.0) / 2.0,
            cy_px: (height_px as f64 - 1.0) / 2.0,
        })
    }

    pub fn width(&self) -> usize {
        self.width_px
    }

    pub fn height(&self) -> usize {
        self.height_px
    }

    pub fn fov_h_deg(&self) -> f64 {
        self.fov_h_deg
    }

    pub fn fov_v_deg(&self) -> f64 {
        self.fov_v_deg
    }

    pub fn focal_px(&self) -> f64 {
        self.focal_px
    }

    pub fn cx(&self) -> f64 {
        self.cx_px
    }

    pub fn cy(&self) -> f64 {
        self.cy_px
    }

    /// Projects a camera-frame point to pixel coordinates. `None` behind the camera.
    pub fn project(&self, p: &Vector3<f64>) -> Option<(f64, f64)> {
        (p.z > 0.0).then(|| {
            (
                self.cx_px + self.focal_px * p.x / p.z,
                self.cy_px + self.focal_px * p.y / p.z,
            )
        })
    }
}

/// Two rectified cameras with identical intrinsics, the right one displaced
/// by `baseline` along the camera x axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RigConfig", into = "RigConfig")]
pub struct StereoRig {
    intrinsics: CameraIntrinsics,
    baseline: f64,
    units_per_meter: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RigConfig {
    pub intrinsics: CameraIntrinsics,
    pub baseline: f64,
    #[serde(default = "default_units_per_meter")]
    pub units_per_meter: f64,
}

fn default_units_per_meter() -> f64 {
    1.0
}

impl TryFrom<RigConfig> for StereoRig {
    type Error = GeometryError;

    fn try_from(c: RigConfig) -> Result<Self, Self::Error> {
        StereoRig::new(c.intrinsics, c.baseline)?.with_units_per_meter(c.units_per_meter)
    }
}

impl From<StereoRig> for RigConfig {
    fn from(r: StereoRig) -> Self {
        Self {
            intrinsics: r.intrinsics,
            baseline: r.baseline,
            units_per_meter: r.units_per_meter,
        }
    }
}

impl StereoRig {
    pub fn new(intrinsics: CameraIntrinsics, baseline: f64) -> Result<Self, GeometryError> {
        if !(baseline > 0.0 && baseline.is_finite()) {
            return Err(GeometryError::InvalidBaseline(baseline));
        }
        Ok(Self {
            intrinsics,
            baseline,
            units_per_meter: 1.0,
        })
    }

    /// 500x500 px, 60 deg x 60 deg, 24-unit baseline (f = 433 px).
    pub fn preset_500px() -> Self {
        let k = CameraIntrinsics::new(500, 500, 60.0).expect("valid preset");
        Self::new(k, 24.0).expect("valid preset")
    }

    pub fn with_units_per_meter(mut self, units_per_meter: f64) -> Result<Self, GeometryError> {
        if !(units_per_meter > 0.0 && units_per_meter.is_finite()) {
            return Err(GeometryError::InvalidScale(units_per_meter));
        }
        self.units_per_meter = units_per_meter;
        Ok(self)
    }

    pub fn intrinsics(&self) -> &CameraIntrinsics {
        &self.intrinsics
    }

    pub fn baseline(&self) -> f64 {
        self.baseline
    }

    pub fn focal_px(&self) -> f64 {
        self.intrinsics.focal_px
    }

    pub fn units_per_meter(&self) -> f64 {
        self.units_per_meter
    }

    /// Scene units to meters.
    pub fn to_meters(&self, units: f64) -> f64 {
        units / self.units_per_meter
    }
}

/// `Z = f * B / d`.
pub fn depth_from_disparity(rig: &StereoRig, d: f64) -> Result<f64, GeometryError> {
    if !(d > 0.0) {
        return Err(GeometryError::NonPositiveDisparity(d));
    }
    Ok(rig.focal_px() * rig.baseline() / d)
}

/// Inverse of [`depth_from_disparity`].
pub fn disparity_from_depth(rig: &StereoRig, z: f64) -> Result<f64, GeometryError> {
    if !(z > 0.0) {
        return Err(GeometryError::NonPositiveDepth(z));
    }
    Ok(rig.focal_px() * rig.baseline() / z)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    /// Unit length.
    pub direction: Vector3<f64>,
}

impl Ray {
    pub fn new(origin: Vector3<f64>, direction: Vector3<f64>) -> Self {
        Self {
            origin,
            direction: direction.normalize(),
        }
    }

    #[inline]
    pub fn at(&self, t: f64) -> Vector3<f64> {
        self.origin + self.direction * t
    }
}

/// Camera-frame ray through pixel `(u, v)`.
pub fn pixel_ray(k: &CameraIntrinsics, u: f64, v: f64) -> Result<Ray, GeometryError> {
    let in_bounds = u >= 0.0 && v >= 0.0 && u < k.width_px as f64 && v < k.height_px as f64;
    if !in_bounds {
        return Err(GeometryError::PixelOutOfBounds {
            u,
            v,
            width: k.width_px,
            height: k.height_px,
        });
    }
    Ok(Ray::new(
        Vector3::zeros(),
        Vector3::new(u - k.cx_px, v - k.cy_px, k.focal_px),
    ))
}

/// Pose of the left camera of a rig in the world frame: position plus yaw
/// about world z and downward pitch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub position: [f64; 3],
    /// Radians, counter-clockwise from world +x.
    pub yaw: f64,
    /// Radians below the horizon.
    pub pitch: f64,
}

impl CameraPose {
    pub fn new(position: [f64; 3], yaw: f64, pitch: f64) -> Self {
        Self {
            position,
            yaw,
            pitch,
        }
    }

    pub fn origin(&self) -> Vector3<f64> {
        Vector3::from(self.position)
    }

    pub fn forward(&self) -> Vector3<f64> {
        let (sy, cy) = self.yaw.sin_cos();
        let (sp, cp) = self.pitch.sin_cos();
        Vector3::new(cy * cp, sy * cp, -sp)
    }

    pub fn right(&self) -> Vector3<f64> {
        let (sy, cy) = self.yaw.sin_cos();
        Vector3::new(sy, -cy, 0.0)
    }

    pub fn down(&self) -> Vector3<f64> {
        self.forward().cross(&self.right())
    }

    pub fn to_world(&self, v_cam: &Vector3<f64>) -> Vector3<f64> {
        self.right() * v_cam.x + self.down() * v_cam.y + self.forward() * v_cam.z
    }

    pub fn to_camera(&self, p_world: &Vector3<f64>) -> Vector3<f64> {
        let rel = p_world - self.origin();
        Vector3::new(
            rel.dot(&self.right()),
            rel.dot(&self.down()),
            rel.dot(&self.forward()),
        )
    }

    /// World ray for a camera-frame ray.
    pub fn world_ray(&self, cam: &Ray) -> Ray {
        Ray::new(
            self.origin() + self.to_world(&cam.origin),
            self.to_world(&cam.direction),
        )
    }

    /// The same orientation translated `baseline` along the camera x axis.
    pub fn right_camera(&self, baseline: f64) -> CameraPose {
        let p = self.origin() + self.right() * baseline;
        CameraPose::new([p.x, p.y, p.z], self.yaw, self.pitch)
    }
}
