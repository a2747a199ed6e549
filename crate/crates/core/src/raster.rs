//! Dense row-major rasters shared by the renderer, the matcher and the
//! evaluators.

use serde::{Deserialize, Serialize};

/// A row-major 2D grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

impl<T: Clone> Grid<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }
}

impl<T> Grid<T> {
    /// Wraps an existing buffer. Panics if the length does not match.
    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), width * height, "grid buffer size mismatch");
        Self {
            width,
            height,
            data,
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> &T {
        &self.data[y * self.width + x]
    }

    #[inline]
    pub fn get_mut(&mut self, x: usize, y: usize) -> &mut T {
        &mut self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: T) {
        self.data[y * self.width + x] = value;
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn row(&self, y: usize) -> &[T] {
        &self.data[y * self.width..(y + 1) * self.width]
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Grid<U> {
        Grid {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(f).collect(),
        }
    }

    pub fn same_dims<U>(&self, other: &Grid<U>) -> bool {
        self.width == other.width && self.height == other.height
    }
}

/// Per-pixel disparity in pixels. Invalid pixels hold `f32::INFINITY`.
#[derive(Debug, Clone, PartialEq)]
pub struct DisparityMap {
    values: Grid<f32>,
    num_disparities: usize,
}

impl DisparityMap {
    pub const INVALID: f32 = f32::INFINITY;

    pub fn new(values: Grid<f32>, num_disparities: usize) -> Self {
        Self {
            values,
            num_disparities,
        }
    }

    pub fn invalid(width: usize, height: usize, num_disparities: usize) -> Self {
        Self::new(Grid::filled(width, height, Self::INVALID), num_disparities)
    }

    pub fn width(&self) -> usize {
        self.values.width()
    }

    pub fn height(&self) -> usize {
        self.values.height()
    }

    pub fn num_disparities(&self) -> usize {
        self.num_disparities
    }

    /// Disparity at `(x, y)`, `None` when the pixel is invalid.
    pub fn get(&self, x: usize, y: usize) -> Option<f32> {
        let v = *self.values.get(x, y);
        v.is_finite().then_some(v)
    }

    pub fn set(&mut self, x: usize, y: usize, d: f32) {
        self.values.set(x, y, d);
    }

    pub fn invalidate(&mut self, x: usize, y: usize) {
        self.values.set(x, y, Self::INVALID);
    }

    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.values.get(x, y).is_finite()
    }

    pub fn valid_mask(&self) -> Grid<bool> {
        self.values.map(|v| v.is_finite())
    }

    pub fn valid_count(&self) -> usize {
        self.values
            .as_slice()
            .iter()
            .filter(|v| v.is_finite())
            .count()
    }

    pub fn values(&self) -> &Grid<f32> {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut Grid<f32> {
        &mut self.values
    }
}

/// Per-pixel metric depth. Invalid pixels (occlusions, sky, range cap)
/// are non-finite or non-positive.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    values: Grid<f32>,
}

impl DepthMap {
    pub const INVALID: f32 = f32::INFINITY;

    pub fn new(values: Grid<f32>) -> Self {
        Self { values }
    }

    pub fn invalid(width: usize, height: usize) -> Self {
        Self::new(Grid::filled(width, height, Self::INVALID))
    }

    pub fn width(&self) -> usize {
        self.values.width()
    }

    pub fn height(&self) -> usize {
        self.values.height()
    }

    pub fn get(&self, x: usize, y: usize) -> Option<f32> {
        let v = *self.values.get(x, y);
        (v.is_finite() && v > 0.0).then_some(v)
    }

    pub fn set(&mut self, x: usize, y: usize, z: f32) {
        self.values.set(x, y, z);
    }

    pub fn invalidate(&mut self, x: usize, y: usize) {
        self.values.set(x, y, Self::INVALID);
    }

    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.get(x, y).is_some()
    }

    pub fn valid_mask(&self) -> Grid<bool> {
        self.values.map(|&v| v.is_finite() && v > 0.0)
    }

    pub fn valid_count(&self) -> usize {
        self.values
            .as_slice()
            .iter()
            .filter(|v| v.is_finite() && **v > 0.0)
            .count()
    }

    /// Multiplies every valid depth by `factor`, e.g. to convert scene
    /// units to meters.
    pub fn scaled(&self, factor: f64) -> DepthMap {
        DepthMap::new(self.values.map(|&v| {
            if v.is_finite() && v > 0.0 {
                (v as f64 * factor) as f32
            } else {
                Self::INVALID
            }
        }))
    }

    /// Valid depth range, if any pixel is valid.
    pub fn min_max(&self) -> Option<(f32, f32)> {
        self.values
            .as_slice()
            .iter()
            .filter(|v| v.is_finite() && **v > 0.0)
            .fold(None, |acc, &v| match acc {
                None => Some((v, v)),
                Some((lo, hi)) => Some((lo.min(v), hi.max(v))),
            })
    }

    pub fn values(&self) -> &Grid<f32> {
        &self.values
    }
}
