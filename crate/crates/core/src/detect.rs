//! Geometric obstacle detector: near-field depth components become boxes,
//! then a confidence filter and greedy NMS.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::DepthMap;

pub const OBSTACLE_LABEL: &str = "obstacle";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DetectError {
    #[error("invalid detector config: {0}")]
    InvalidConfig(String),
}

/// Axis-aligned box in pixels. The maximum edges are exclusive, so a box
/// around pixel columns `a..=b` spans `a` to `b + 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn width(&self) -> f64 {
        (self.x_max - self.x_min).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y_max - self.y_min).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center_x(&self) -> f64 {
        0.5 * (self.x_min + self.x_max)
    }
}

impl From<[f64; 4]> for BBox {
    fn from(v: [f64; 4]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x_min, b.y_min, b.x_max, b.y_max]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub confidence: f64,
    /// Median valid depth in meters, `None` when unknown.
    pub range_m: Option<f64>,
    pub label: String,
    #[serde(rename = "ts")]
    pub source_timestamp: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    /// Meters; only nearer pixels can form detections.
    pub near_threshold: f64,
    pub confidence_threshold: f64,
    pub nms_iou_threshold: f64,
    /// Minimum component size in pixels.
    pub min_area: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            near_threshold: 1.0,
            confidence_threshold: 0.25,
            nms_iou_threshold: 0.2,
            min_area: 25,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<(), DetectError> {
        if !(self.near_threshold > 0.0 && self.near_threshold.is_finite()) {
            return Err(DetectError::InvalidConfig(
                "near_threshold must be positive".into(),
            ));
        }
        for (name, v) in [
            ("confidence_threshold", self.confidence_threshold),
            ("nms_iou_threshold", self.nms_iou_threshold),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(DetectError::InvalidConfig(format!(
                    "{name} must be in [0, 1]"
                )));
            }
        }
        Ok(())
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

fn nms_order(a: &Detection, b: &Detection) -> Ordering {
    b.confidence
        .total_cmp(&a.confidence)
        .then(a.bbox.x_min.total_cmp(&b.bbox.x_min))
        .then(a.bbox.y_min.total_cmp(&b.bbox.y_min))
}

/// Greedy NMS: visit by confidence (descending, then smaller `x_min`, then
/// smaller `y_min`) and keep a box iff its IoU with every kept box is at
/// most `iou_threshold`. Output is in visiting order.
pub fn nms(detections: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut sorted: Vec<&Detection> = detections.iter().collect();
    sorted.sort_by(|a, b| nms_order(a, b));
    let mut kept: Vec<Detection> = Vec::new();
    for d in sorted {
        if kept.iter().all(|k| iou(&k.bbox, &d.bbox) <= iou_threshold) {
            kept.push(d.clone());
        }
    }
    kept
}

fn median(values: &mut [f32]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2] as f64
    } else {
        0.5 * (values[n / 2 - 1] as f64 + values[n / 2] as f64)
    })
}

/// Near-field components of a metric depth map as candidate detections,
/// before the confidence filter and NMS. Components are enumerated in
/// row-major order of their first pixel.
pub fn near_components(
    depth: &DepthMap,
    config: &DetectorConfig,
    timestamp: f64,
) -> Vec<Detection> {
    let (w, h) = (depth.width(), depth.height());
    let vals = depth.values().as_slice();
    let near: Vec<bool> = vals
        .iter()
        .map(|&z| z.is_finite() && z > 0.0 && (z as f64) < config.near_threshold)
        .collect();
    let mut seen = vec![false; w * h];
    let mut stack = Vec::new();
    let mut out = Vec::new();
    for start in 0..w * h {
        if !near[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        let mut depths = Vec::new();
        while let Some(i) = stack.pop() {
            let (x, y) = (i % w, i / w);
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
            depths.push(vals[i]);
            let mut push = |j: usize| {
                if near[j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if x > 0 {
                push(i - 1);
            }
            if x + 1 < w {
                push(i + 1);
            }
            if y > 0 {
                push(i - w);
            }
            if y + 1 < h {
                push(i + w);
            }
        }
        let area = depths.len();
        if area < config.min_area {
            continue;
        }
        let bbox = BBox::new(x0 as f64, y0 as f64, (x1 + 1) as f64, (y1 + 1) as f64);
        out.push(Detection {
            bbox,
            confidence: area as f64 / bbox.area(),
            range_m: median(&mut depths),
            label: OBSTACLE_LABEL.into(),
            source_timestamp: timestamp,
        });
    }
    out
}

/// Full detector: near-field components, confidence filter, NMS.
pub fn detect(depth: &DepthMap, config: &DetectorConfig, timestamp: f64) -> Vec<Detection> {
    let candidates: Vec<Detection> = near_components(depth, config, timestamp)
        .into_iter()
        .filter(|d| d.confidence >= config.confidence_threshold)
        .collect();
    nms(&candidates, config.nms_iou_threshold)
}
