use rayon::prelude::*;

use super::cost::CostVolume;
use super::SgmParams;
use crate::raster::{DisparityMap, Grid};

/// Parabola vertex offset through `(-1, s_minus)`, `(0, s0)`, `(1, s_plus)`,
/// clamped to `[-0.5, 0.5]`. Zero when the fit is flat or concave.
pub fn subpixel_offset(s_minus: u32, s0: u32, s_plus: u32) -> f32 {
    let denom = s_minus as i64 + s_plus as i64 - 2 * s0 as i64;
    if denom <= 0 {
        return 0.0;
    }
    let off = (s_minus as f64 - s_plus as f64) / (2.0 * denom as f64);
    off.clamp(-0.5, 0.5) as f32
}

fn select_pixel(s: &[u16], uniqueness_ratio: Option<u32>) -> f32 {
    let nd = s.len();
    let mut best_d = 0;
    for d in 1..nd {
        if s[d] < s[best_d] {
            best_d = d;
        }
    }
    let best = s[best_d] as u64;
    if let Some(ratio) = uniqueness_ratio {
        let second = s
            .iter()
            .enumerate()
            .filter(|(d, _)| d.abs_diff(best_d) > 1)
            .map(|(_, &c)| c as u64)
            .min();
        if let Some(second) = second {
            if second == best || second * 100 < best * (100 + ratio as u64) {
                return DisparityMap::INVALID;
            }
        }
    }
    if best_d == 0 || best_d + 1 == nd {
        return best_d as f32;
    }
    best_d as f32 + subpixel_offset(s[best_d - 1] as u32, s[best_d] as u32, s[best_d + 1] as u32)
}

/// Winner-take-all selection with ties to the smaller disparity, parabola
/// refinement away from the volume edges and the uniqueness test from
/// `params.uniqueness_ratio`.
pub fn select_disparity(aggregated: &CostVolume, params: &SgmParams) -> DisparityMap {
    select_disparity_with(aggregated, Some(params.uniqueness_ratio))
}

/// Selection with an optional uniqueness test. A pixel is invalidated when
/// the cheapest disparity more than one level from the winner costs less
/// than `best * (1 + ratio / 100)` or exactly ties it.
pub fn select_disparity_with(
    aggregated: &CostVolume,
    uniqueness_ratio: Option<u32>,
) -> DisparityMap {
    let (w, h, nd) = (
        aggregated.width(),
        aggregated.height(),
        aggregated.num_disparities(),
    );
    let costs = aggregated.as_slice();
    let values: Vec<f32> = costs
        .par_chunks(nd)
        .map(|s| select_pixel(s, uniqueness_ratio))
        .collect();
    DisparityMap::new(Grid::from_vec(w, h, values), nd)
}
