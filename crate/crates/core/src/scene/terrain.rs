use nalgebra::Vector3;

use super::SceneError;
use crate::geometry::Ray;
use crate::noise::fbm2;
use crate::raster::Grid;

const OCTAVES: u32 = 5;
const PERSISTENCE: f64 = 0.5;
const REFINE_ITERATIONS: usize = 8;

/// Bilinearly interpolated heightmap centered on the world origin.
#[derive(Debug, Clone, PartialEq)]
pub struct Terrain {
    heightmap: Grid<f64>,
    cell_size: f64,
    seed: u64,
    origin: (f64, f64),
    min_height: f64,
    max_height: f64,
}

/// Fractal value-noise terrain. `roughness` is the peak elevation
/// amplitude in scene units; zero yields an exactly flat plane at 0.
pub fn generate_terrain(
    seed: u64,
    extent: (f64, f64),
    cell_size: f64,
    roughness: f64,
) -> Result<Terrain, SceneError> {
    let (width, length) = extent;
    let degenerate = !(cell_size > 0.0 && width.is_finite() && length.is_finite())
        || !(width >= cell_size && length >= cell_size)
        || !roughness.is_finite();
    if degenerate {
        return Err(SceneError::DegenerateExtent {
            width,
            length,
            cell_size,
        });
    }
    let nx = (width / cell_size).ceil() as usize + 1;
    let ny = (length / cell_size).ceil() as usize + 1;
    let origin = (
        -((nx - 1) as f64) * cell_size / 2.0,
        -((ny - 1) as f64) * cell_size / 2.0,
    );
    let wavelength = width.max(length) / 4.0;
    let heightmap = Grid::from_fn(nx, ny, |i, j| {
        if roughness == 0.0 {
            return 0.0;
        }
        let x = origin.0 + i as f64 * cell_size;
        let y = origin.1 + j as f64 * cell_size;
        roughness * fbm2(seed, x / wavelength, y / wavelength, OCTAVES, PERSISTENCE)
    });
    Ok(Terrain::from_heightmap(heightmap, cell_size, seed))
}

impl Terrain {
    /// Wraps an explicit heightmap. Panics on grids smaller than 2x2.
    pub fn from_heightmap(heightmap: Grid<f64>, cell_size: f64, seed: u64) -> Self {
        assert!(heightmap.width() >= 2 && heightmap.height() >= 2);
        let origin = (
            -((heightmap.width() - 1) as f64) * cell_size / 2.0,
            -((heightmap.height() - 1) as f64) * cell_size / 2.0,
        );
        let (min_height, max_height) = heightmap
            .as_slice()
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &h| {
                (lo.min(h), hi.max(h))
            });
        Self {
            heightmap,
            cell_size,
            seed,
            origin,
            min_height,
            max_height,
        }
    }

    pub fn heightmap(&self) -> &Grid<f64> {
        &self.heightmap
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// `(width, length)` actually covered by the grid.
    pub fn extent(&self) -> (f64, f64) {
        (
            (self.heightmap.width() - 1) as f64 * self.cell_size,
            (self.heightmap.height() - 1) as f64 * self.cell_size,
        )
    }

    /// `(x_min, y_min, x_max, y_max)`.
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        let (w, l) = self.extent();
        (
            self.origin.0,
            self.origin.1,
            self.origin.0 + w,
            self.origin.1 + l,
        )
    }

    pub fn height_range(&self) -> (f64, f64) {
        (self.min_height, self.max_height)
    }

    /// Surface elevation at `(x, y)`, `None` outside the grid.
    pub fn height_at(&self, x: f64, y: f64) -> Option<f64> {
        let (x0, y0, x1, y1) = self.bounds();
        if !(x >= x0 && x <= x1 && y >= y0 && y <= y1) {
            return None;
        }
        Some(self.height_clamped(x, y))
    }

    fn height_clamped(&self, x: f64, y: f64) -> f64 {
        let gx = ((x - self.origin.0) / self.cell_size).max(0.0);
        let gy = ((y - self.origin.1) / self.cell_size).max(0.0);
        let max_i = self.heightmap.width() - 2;
        let max_j = self.heightmap.height() - 2;
        let i = (gx.floor() as usize).min(max_i);
        let j = (gy.floor() as usize).min(max_j);
        let tx = (gx - i as f64).clamp(0.0, 1.0);
        let ty = (gy - j as f64).clamp(0.0, 1.0);
        let h = &self.heightmap;
        let a = h.get(i, j) + (h.get(i + 1, j) - h.get(i, j)) * tx;
        let b = h.get(i, j + 1) + (h.get(i + 1, j + 1) - h.get(i, j + 1)) * tx;
        a + (b - a) * ty
    }

    /// Upward surface normal from central differences.
    pub fn normal_at(&self, x: f64, y: f64) -> Vector3<f64> {
        let e = self.cell_size * 0.5;
        let dhdx = (self.height_clamped(x + e, y) - self.height_clamped(x - e, y)) / (2.0 * e);
        let dhdy = (self.height_clamped(x, y + e) - self.height_clamped(x, y - e)) / (2.0 * e);
        Vector3::new(-dhdx, -dhdy, 1.0).normalize()
    }

    /// Nearest ray/surface intersection within `t_max`.
    ///
    /// Marches at half-cell steps inside the terrain's bounding slab, then
    /// refines the bracketing interval by bisection and a final secant step
    /// (exact on planar patches).
    pub fn intersect(&self, ray: &Ray, t_max: f64) -> Option<f64> {
        let (t_enter, t_exit) = self.clip(ray)?;
        let t_exit = t_exit.min(t_max);
        if t_enter > t_exit {
            return None;
        }
        let gap = |t: f64| {
            let p = ray.at(t);
            p.z - self.height_clamped(p.x, p.y)
        };
        let step = self.cell_size * 0.5;
        let mut t_prev = t_enter;
        let mut f_prev = gap(t_prev);
        if f_prev <= 0.0 {
            return Some(t_prev);
        }
        loop {
            if t_prev >= t_exit {
                return None;
            }
            let t = (t_prev + step).min(t_exit);
            let f = gap(t);
            if f <= 0.0 {
                let (mut a, mut fa, mut b, mut fb) = (t_prev, f_prev, t, f);
                for _ in 0..REFINE_ITERATIONS {
                    let m = 0.5 * (a + b);
                    let fm = gap(m);
                    if fm <= 0.0 {
                        b = m;
                        fb = fm;
                    } else {
                        a = m;
                        fa = fm;
                    }
                }
                let denom = fa - fb;
                return Some(if denom > 0.0 {
                    a + (b - a) * fa / denom
                } else {
                    b
                });
            }
            t_prev = t;
            f_prev = f;
        }
    }

    /// Ray parameter interval inside the bounding box of the surface.
    fn clip(&self, ray: &Ray) -> Option<(f64, f64)> {
        let (x0, y0, x1, y1) = self.bounds();
        // pad the height slab so a flat surface is not a zero-thickness box
        let pad = self.cell_size * 1e-6;
        let lo = [x0, y0, self.min_height - pad];
        let hi = [x1, y1, self.max_height + pad];
        let mut t0: f64 = 0.0;
        let mut t1: f64 = f64::INFINITY;
        for axis in 0..3 {
            let o = ray.origin[axis];
            let d = ray.direction[axis];
            if d.abs() < 1e-15 {
                if o < lo[axis] || o > hi[axis] {
                    return None;
                }
                continue;
            }
            let (mut a, mut b) = ((lo[axis] - o) / d, (hi[axis] - o) / d);
            if a > b {
                std::mem::swap(&mut a, &mut b);
            }
            t0 = t0.max(a);
            t1 = t1.min(b);
            if t0 > t1 {
                return None;
            }
        }
        Some((t0, t1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let a = generate_terrain(42, (20.0, 10.0), 0.5, 1.0).unwrap();
        let b = generate_terrain(42, (20.0, 10.0), 0.5, 1.0).unwrap();
        let bits = |t: &Terrain| {
            t.heightmap()
                .as_slice()
                .iter()
                .map(|h| h.to_bits())
                .collect::<Vec<_>>()
        };
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn zero_roughness_is_flat() {
        let t = generate_terrain(42, (20.0, 10.0), 0.5, 0.0).unwrap();
        assert!(t.heightmap().as_slice().iter().all(|h| h.to_bits() == 0));
    }

    #[test]
    fn seeds_differ() {
        let a = generate_terrain(1, (10.0, 10.0), 0.5, 1.0).unwrap();
        let b = generate_terrain(2, (10.0, 10.0), 0.5, 1.0).unwrap();
        let differing = a
            .heightmap()
            .as_slice()
            .iter()
            .zip(b.heightmap().as_slice())
            .filter(|(x, y)| x != y)
            .count();
        assert!(differing >= 1);
    }

    #[test]
    fn degenerate_extents() {
        assert!(generate_terrain(1, (0.0, 10.0), 0.5, 1.0).is_err());
        assert!(generate_terrain(1, (10.0, 10.0), 0.0, 1.0).is_err());
        assert!(generate_terrain(1, (0.2, 10.0), 0.5, 1.0).is_err());
        assert!(generate_terrain(1, (10.0, -1.0), 0.5, 1.0).is_err());
    }

    #[test]
    fn grid_covers_extent_and_is_centered() {
        let t = generate_terrain(1, (10.0, 6.0), 0.5, 1.0).unwrap();
        assert_eq!(t.heightmap().width(), 21);
        assert_eq!(t.heightmap().height(), 13);
        assert_eq!(t.bounds(), (-5.0, -3.0, 5.0, 3.0));
        assert!(t.height_at(5.1, 0.0).is_none());
        let (lo, hi) = t.height_range();
        assert!(lo <= hi && hi <= 1.0 && lo >= -1.0);
    }

    #[test]
    fn heights_interpolate_nodes() {
        let t = generate_terrain(3, (4.0, 4.0), 1.0, 1.0).unwrap();
        let h = t.heightmap();
        assert_eq!(t.height_at(-2.0, -2.0).unwrap(), *h.get(0, 0));
        let mid = t.height_at(-1.5, -2.0).unwrap();
        assert!((mid - 0.5 * (h.get(0, 0) + h.get(1, 0))).abs() < 1e-12);
    }

    #[test]
    fn flat_intersection_is_exact() {
        let t = generate_terrain(3, (40.0, 40.0), 0.5, 0.0).unwrap();
        let ray = Ray::new(Vector3::new(0.3, -0.2, 7.0), Vector3::new(0.4, 0.1, -1.0));
        let hit = t.intersect(&ray, f64::INFINITY).unwrap();
        assert!(ray.at(hit).z.abs() < 1e-12);
        let up = Ray::new(Vector3::new(0.0, 0.0, 1.0), Vector3::new(0.0, 0.3, 1.0));
        assert!(t.intersect(&up, f64::INFINITY).is_none());
    }

    #[test]
    fn rough_intersection_lands_on_surface() {
        let t = generate_terrain(8, (30.0, 30.0), 0.25, 0.8).unwrap();
        for k in 0..50 {
            let a = k as f64 * 0.1;
            let ray = Ray::new(
                Vector3::new(0.0, 0.0, 3.0),
                Vector3::new(a.cos(), a.sin(), -0.3),
            );
            if let Some(hit) = t.intersect(&ray, f64::INFINITY) {
                let p = ray.at(hit);
                assert!((p.z - t.height_at(p.x, p.y).unwrap()).abs() < 1e-3);
            }
        }
    }
}
