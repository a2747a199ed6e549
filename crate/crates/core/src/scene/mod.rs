//! Procedural lunar-analog terrain with boulder obstacles, and a CPU
//! raycaster that turns it into rectified stereo pairs with ground-truth
//! depth.

mod render;
mod terrain;

pub use render::{
    render_depth, render_stereo, render_stereo_with, render_view, Hit, RenderOptions, StereoFrame,
    ViewRender,
};
pub use terrain::{generate_terrain, Terrain};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SceneError {
    #[error("degenerate terrain extent {width} x {length} with cell size {cell_size}")]
    DegenerateExtent {
        width: f64,
        length: f64,
        cell_size: f64,
    },
    #[error("camera at {0:?} is below the terrain surface")]
    CameraBelowSurface([f64; 3]),
    #[error("invalid scene: {0}")]
    Invalid(String),
}

/// Axis-aligned ellipsoid obstacle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Boulder {
    #[serde(default)]
    pub id: u32,
    pub center: [f64; 3],
    /// Semi-axes along world x, y, z.
    pub radii: [f64; 3],
}

impl Boulder {
    pub fn center(&self) -> Vector3<f64> {
        Vector3::from(self.center)
    }

    /// Whether the ground-plane point `(x, y)` lies inside the boulder's
    /// elliptical footprint.
    pub fn footprint_contains(&self, x: f64, y: f64) -> bool {
        let dx = (x - self.center[0]) / self.radii[0];
        let dy = (y - self.center[1]) / self.radii[1];
        dx * dx + dy * dy < 1.0
    }

    /// Ray parameter of the nearest forward intersection.
    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        let r = Vector3::from(self.radii);
        let o = (origin - self.center()).component_div(&r);
        let d = dir.component_div(&r);
        let a = d.dot(&d);
        let b = 2.0 * o.dot(&d);
        let c = o.dot(&o) - 1.0;
        let disc = b * b - 4.0 * a * c;
        if disc < 0.0 {
            return None;
        }
        let sq = disc.sqrt();
        let t0 = (-b - sq) / (2.0 * a);
        let t1 = (-b + sq) / (2.0 * a);
        if t0 > 1e-9 {
            Some(t0)
        } else if t1 > 1e-9 {
            Some(t1)
        } else {
            None
        }
    }

    pub fn normal_at(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let r = Vector3::from(self.radii);
        (p - self.center())
            .component_div(&r.component_mul(&r))
            .normalize()
    }
}

/// Axis-aligned region of the ground plane used to constrain placement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

/// Places `count` boulders anywhere on the terrain, each resting on the
/// surface.
pub fn place_boulders(
    terrain: &Terrain,
    seed: u64,
    count: usize,
    radius_range: (f64, f64),
) -> Vec<Boulder> {
    let (x0, y0, x1, y1) = terrain.bounds();
    let margin = radius_range.1 * 1.2;
    let region = Region {
        min: [x0 + margin, y0 + margin],
        max: [x1 - margin, y1 - margin],
    };
    place_boulders_in(terrain, seed, count, radius_range, region)
}

/// Like [`place_boulders`] but restricted to `region`. Footprints are kept
/// apart when the region allows; after a bounded number of attempts a
/// candidate is accepted regardless so the count is always met.
pub fn place_boulders_in(
    terrain: &Terrain,
    seed: u64,
    count: usize,
    radius_range: (f64, f64),
    region: Region,
) -> Vec<Boulder> {
    const MAX_ATTEMPTS: usize = 64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xB0_1D_E2);
    let (rmin, rmax) = (
        radius_range.0.min(radius_range.1),
        radius_range.0.max(radius_range.1),
    );
    let mut out: Vec<Boulder> = Vec::with_capacity(count);
    for id in 0..count {
        let mut candidate = None;
        for attempt in 0..MAX_ATTEMPTS {
            let r = if rmax > rmin {
                rng.random_range(rmin..=rmax)
            } else {
                rmin
            };
            let radii = [
                r * rng.random_range(0.85..=1.15),
                r * rng.random_range(0.85..=1.15),
                r * rng.random_range(0.6..=1.0),
            ];
            let x = sample_span(&mut rng, region.min[0], region.max[0]);
            let y = sample_span(&mut rng, region.min[1], region.max[1]);
            let clear = out.iter().all(|b| {
                let gap = (b.radii[0].max(b.radii[1]) + radii[0].max(radii[1])) * 1.1;
                (b.center[0] - x).hypot(b.center[1] - y) > gap
            });
            if clear || attempt + 1 == MAX_ATTEMPTS {
                candidate = Some((x, y, radii));
                break;
            }
        }
        let (x, y, radii) = candidate.expect("loop always yields a candidate");
        let ground = terrain.height_at(x, y).unwrap_or(0.0);
        out.push(Boulder {
            id: id as u32,
            center: [x, y, ground + radii[2]],
            radii,
        });
    }
    out
}

fn sample_span(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        (lo + hi) / 2.0
    }
}

/// Surface appearance knobs. The albedo texture is a band-limited hash
/// noise evaluated at world coordinates, so both views see the same pattern.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TextureParams {
    /// Fraction of albedo modulated by the texture, in `[0, 1]`.
    pub amplitude: f64,
    /// Feature size of the coarsest texture octave, scene units.
    pub scale: f64,
}

impl Default for TextureParams {
    fn default() -> Self {
        Self {
            amplitude: 0.7,
            scale: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneDescription {
    pub terrain: Terrain,
    pub boulders: Vec<Boulder>,
    /// Unit vector pointing from the surface toward the sun.
    pub sun_direction: Vector3<f64>,
    pub albedo: f64,
    pub texture: TextureParams,
    pub texture_seed: u64,
}

impl SceneDescription {
    pub fn new(
        terrain: Terrain,
        boulders: Vec<Boulder>,
        sun_direction: [f64; 3],
        albedo: f64,
    ) -> Result<Self, SceneError> {
        let sun = Vector3::from(sun_direction);
        if !(sun.norm() > 0.0 && sun.norm().is_finite()) {
            return Err(SceneError::Invalid("sun_direction must be non-zero".into()));
        }
        if !(albedo > 0.0 && albedo <= 1.0) {
            return Err(SceneError::Invalid(format!(
                "albedo {albedo} outside (0, 1]"
            )));
        }
        for b in &boulders {
            if b.radii.iter().any(|r| !(*r > 0.0)) {
                return Err(SceneError::Invalid(format!(
                    "boulder {} has non-positive radii",
                    b.id
                )));
            }
        }
        let texture_seed = terrain.seed().wrapping_mul(31).wrapping_add(17);
        Ok(Self {
            terrain,
            boulders,
            sun_direction: sun.normalize(),
            albedo,
            texture: TextureParams::default(),
            texture_seed,
        })
    }

    pub fn with_texture(mut self, texture: TextureParams) -> Self {
        self.texture = texture;
        self
    }

    /// Builds the scene described by a scene file.
    pub fn from_spec(spec: &SceneSpec) -> Result<Self, SceneError> {
        let terrain = generate_terrain(spec.seed, spec.extent, spec.cell_size, spec.roughness)?;
        let mut boulders: Vec<Boulder> = spec
            .boulders
            .iter()
            .enumerate()
            .map(|(i, b)| Boulder {
                id: i as u32,
                center: b.center,
                radii: b.radii,
            })
            .collect();
        if let Some(random) = &spec.random_boulders {
            let start = boulders.len() as u32;
            let region = random.region.unwrap_or_else(|| {
                let (x0, y0, x1, y1) = terrain.bounds();
                let m = random.radius_range.1 * 1.2;
                Region {
                    min: [x0 + m, y0 + m],
                    max: [x1 - m, y1 - m],
                }
            });
            boulders.extend(
                place_boulders_in(
                    &terrain,
                    spec.seed,
                    random.count,
                    random.radius_range,
                    region,
                )
                .into_iter()
                .map(|mut b| {
                    b.id += start;
                    b
                }),
            );
        }
        let texture = TextureParams {
            amplitude: spec.texture_amplitude,
            scale: spec.texture_scale,
        };
        if !(0.0..=1.0).contains(&texture.amplitude) || !(texture.scale > 0.0) {
            return Err(SceneError::Invalid(
                "texture amplitude/scale out of range".into(),
            ));
        }
        Ok(Self::new(terrain, boulders, spec.sun_direction, spec.albedo)?.with_texture(texture))
    }
}

/// Boulder entry of a scene file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoulderSpec {
    pub center: [f64; 3],
    pub radii: [f64; 3],
}

/// Request for seeded random boulders in a scene file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RandomBoulders {
    pub count: usize,
    pub radius_range: (f64, f64),
    #[serde(default)]
    pub region: Option<Region>,
}

/// Scene file contents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub seed: u64,
    pub extent: (f64, f64),
    pub cell_size: f64,
    pub roughness: f64,
    pub boulders: Vec<BoulderSpec>,
    /// Absent in a scene file means no random boulders.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub random_boulders: Option<RandomBoulders>,
    pub sun_direction: [f64; 3],
    pub albedo: f64,
    pub texture_amplitude: f64,
    pub texture_scale: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 1,
            extent: (12.0, 12.0),
            cell_size: 0.1,
            roughness: 0.03,
            boulders: Vec::new(),
            random_boulders: Some(RandomBoulders {
                count: 12,
                radius_range: (0.05, 0.12),
                region: None,
            }),
            sun_direction: [0.3, 0.2, 0.9],
            albedo: 0.8,
            texture_amplitude: TextureParams::default().amplitude,
            texture_scale: TextureParams::default().scale,
        }
    }
}
