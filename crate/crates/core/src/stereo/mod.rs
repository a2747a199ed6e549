//! Semi-global matching over census costs.
//!
//! The pipeline is census transform, Hamming cost volume, multi-path
//! aggregation, winner-take-all selection with parabola refinement and a
//! uniqueness test, left-right consistency and speckle removal.

mod aggregate;
mod census;
mod cost;
mod filter;
mod select;

use image::GrayImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use aggregate::{aggregate_direction, aggregate_paths, DIRECTIONS};
pub use census::{census_transform, hamming, CensusImage};
pub use cost::{build_cost_volume, build_cost_volume_right, CostVolume};
pub use filter::{lr_consistency, speckle_filter};
pub use select::{select_disparity, select_disparity_with, subpixel_offset};

use crate::geometry::StereoRig;
use crate::raster::{DepthMap, DisparityMap, Grid};
use crate::scene::StereoFrame;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StereoError {
    #[error("invalid stereo parameters: {0}")]
    InvalidParams(String),
    #[error("census window {window:?} does not fit a {width}x{height} image")]
    WindowTooLarge {
        window: (usize, usize),
        width: usize,
        height: usize,
    },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgmParams {
    pub num_disparities: usize,
    pub census_window: (usize, usize),
    pub p1: u16,
    pub p2: u16,
    pub num_paths: usize,
    /// Percent margin the best cost must win by over any disparity more
    /// than one level away.
    pub uniqueness_ratio: u32,
    pub lr_max_diff: f32,
    /// Minimum component size in pixels kept by the speckle filter.
    pub speckle_window: usize,
    pub speckle_range: f32,
}

impl Default for SgmParams {
    fn default() -> Self {
        let census_window = (5, 5);
        let bits = (census_window.0 * census_window.1 - 1) as u16;
        let p1 = 8 * (bits / 8);
        Self {
            num_disparities: 64,
            census_window,
            p1,
            p2: 4 * p1,
            num_paths: 8,
            uniqueness_ratio: 10,
            lr_max_diff: 1.0,
            speckle_window: 100,
            speckle_range: 2.0,
        }
    }
}

impl SgmParams {
    /// Checks the parameters that govern aggregation: penalties, path
    /// count, and that `num_paths * (max_cost + p2)` fits the `u16` sums.
    pub fn validate_aggregation(&self, max_cost: u16) -> Result<(), StereoError> {
        if !(self.p1 > 0 && self.p1 < self.p2) {
            return Err(StereoError::InvalidParams(format!(
                "penalties must satisfy 0 < p1 < p2 (p1={}, p2={})",
                self.p1, self.p2
            )));
        }
        if self.num_paths != 4 && self.num_paths != 8 {
            return Err(StereoError::InvalidParams(format!(
                "num_paths must be 4 or 8, got {}",
                self.num_paths
            )));
        }
        let bound = self.num_paths as u64 * (max_cost as u64 + self.p2 as u64);
        if bound > u16::MAX as u64 {
            return Err(StereoError::InvalidParams(format!(
                "aggregated cost bound {bound} overflows 16-bit sums; lower p2 or num_paths"
            )));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), StereoError> {
        if self.num_disparities == 0 || self.num_disparities % 16 != 0 {
            return Err(StereoError::InvalidParams(format!(
                "num_disparities must be a positive multiple of 16, got {}",
                self.num_disparities
            )));
        }
        census::validate_window(self.census_window)?;
        let bits = (self.census_window.0 * self.census_window.1 - 1) as u16;
        self.validate_aggregation(bits)?;
        if self.uniqueness_ratio > 100 {
            return Err(StereoError::InvalidParams(
                "uniqueness_ratio must be <= 100".into(),
            ));
        }
        if !(self.lr_max_diff >= 0.0) || !(self.speckle_range >= 0.0) {
            return Err(StereoError::InvalidParams(
                "lr_max_diff and speckle_range must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Full matching pipeline on a rectified pair, returning the filtered
/// left-view disparity.
pub fn match_stereo(
    left: &GrayImage,
    right: &GrayImage,
    params: &SgmParams,
) -> Result<DisparityMap, StereoError> {
    params.validate()?;
    if left.dimensions() != right.dimensions() {
        return Err(StereoError::DimensionMismatch(format!(
            "left {:?} vs right {:?}",
            left.dimensions(),
            right.dimensions()
        )));
    }
    let cl = census_transform(left, params.census_window)?;
    let cr = census_transform(right, params.census_window)?;

    let left_cost = build_cost_volume(&cl, &cr, params.num_disparities)?;
    let left_agg = aggregate_paths(&left_cost, params)?;
    drop(left_cost);
    let left_disp = select_disparity(&left_agg, params);
    drop(left_agg);

    let right_cost = build_cost_volume_right(&cl, &cr, params.num_disparities)?;
    let right_agg = aggregate_paths(&right_cost, params)?;
    drop(right_cost);
    let right_disp = select_disparity_with(&right_agg, None);
    drop(right_agg);

    let checked = lr_consistency(&left_disp, &right_disp, params.lr_max_diff)?;
    Ok(speckle_filter(
        &checked,
        params.speckle_window,
        params.speckle_range,
    ))
}

/// Converts disparity to optical-axis depth in scene units via `Z = fB/d`.
/// Invalid or zero disparities give invalid depth.
pub fn disparity_to_depth(rig: &StereoRig, disp: &DisparityMap) -> DepthMap {
    let fb = rig.focal_px() * rig.baseline();
    let values = disp.values().map(|&d| {
        if d.is_finite() && d > 0.0 {
            (fb / d as f64) as f32
        } else {
            DepthMap::INVALID
        }
    });
    DepthMap::new(values)
}

/// Matches a rendered frame and converts the result to depth in scene units.
pub fn compute_depth(
    rig: &StereoRig,
    frame: &StereoFrame,
    params: &SgmParams,
) -> Result<(DisparityMap, DepthMap), StereoError> {
    let k = rig.intrinsics();
    let dims = (k.width() as u32, k.height() as u32);
    if frame.left.dimensions() != dims {
        return Err(StereoError::DimensionMismatch(format!(
            "frame {:?} vs rig intrinsics {:?}",
            frame.left.dimensions(),
            dims
        )));
    }
    let disp = match_stereo(&frame.left, &frame.right, params)?;
    let depth = disparity_to_depth(rig, &disp);
    Ok((disp, depth))
}

/// Sum of `|d(x+1, y) - d(x, y)|` over horizontally adjacent valid pairs.
pub fn total_variation(disp: &DisparityMap) -> f64 {
    let v: &Grid<f32> = disp.values();
    let mut tv = 0.0;
    for y in 0..v.height() {
        for w in v.row(y).windows(2) {
            if w[0].is_finite() && w[1].is_finite() {
                tv += (w[1] - w[0]).abs() as f64;
            }
        }
    }
    tv
}
