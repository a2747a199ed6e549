use std::collections::VecDeque;

use super::StereoError;
use crate::raster::DisparityMap;

/// Left-right consistency: a left pixel with disparity `d_L` survives iff
/// the right view at `x - round(d_L)` is valid and within `max_diff` of it.
pub fn lr_consistency(
    left: &DisparityMap,
    right: &DisparityMap,
    max_diff: f32,
) -> Result<DisparityMap, StereoError> {
    if left.width() != right.width() || left.height() != right.height() {
        return Err(StereoError::DimensionMismatch(format!(
            "left disparity {}x{} vs right {}x{}",
            left.width(),
            left.height(),
            right.width(),
            right.height()
        )));
    }
    let mut out = left.clone();
    for y in 0..left.height() {
        for x in 0..left.width() {
            let Some(dl) = left.get(x, y) else { continue };
            let xr = x as i64 - dl.round() as i64;
            let keep = xr >= 0
                && right
                    .get(xr as usize, y)
                    .is_some_and(|dr| (dl - dr).abs() <= max_diff);
            if !keep {
                out.invalidate(x, y);
            }
        }
    }
    Ok(out)
}

/// Invalidates connected regions smaller than `window` pixels. Neighbors
/// (4-connectivity) join a region when their disparities differ by at most
/// `range`.
pub fn speckle_filter(disp: &DisparityMap, window: usize, range: f32) -> DisparityMap {
    let (w, h) = (disp.width(), disp.height());
    let mut out = disp.clone();
    if window == 0 {
        return out;
    }
    let vals = disp.values().as_slice();
    let mut label = vec![false; w * h];
    let mut queue = VecDeque::new();
    let mut component = Vec::new();
    for start in 0..w * h {
        if label[start] || !vals[start].is_finite() {
            continue;
        }
        label[start] = true;
        queue.push_back(start);
        component.clear();
        while let Some(i) = queue.pop_front() {
            component.push(i);
            let (x, y) = (i % w, i / w);
            let d = vals[i];
            let mut visit = |j: usize| {
                if !label[j] && vals[j].is_finite() && (vals[j] - d).abs() <= range {
                    label[j] = true;
                    queue.push_back(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        if component.len() < window {
            for &i in &component {
                out.invalidate(i % w, i / w);
            }
        }
    }
    out
}
