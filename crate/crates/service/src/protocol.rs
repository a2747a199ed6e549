//! Wire protocol between the service and teleoperation clients. Every
//! message is one JSON text frame `{type, seq, ts, payload}`.

use base64::Engine;
use image::{GrayImage, Rgb, RgbImage};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use rover_core::detect::Detection;
use rover_core::raster::DepthMap;
use rover_core::rover::PathPlan;

/// JSON schema for [`WireMessage`], shipped next to the crate.
pub const SCHEMA: &str = include_str!("../protocol.schema.json");

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageType {
    Hello,
    Frame,
    Detections,
    Depth,
    SnapshotMeta,
    Telemetry,
    Pose,
    Cmd,
    PathLoad,
    Resume,
    HaltEvent,
    Error,
}

impl MessageType {
    pub const ALL: [MessageType; 12] = [
        MessageType::Hello,
        MessageType::Frame,
        MessageType::Detections,
        MessageType::Depth,
        MessageType::SnapshotMeta,
        MessageType::Telemetry,
        MessageType::Pose,
        MessageType::Cmd,
        MessageType::PathLoad,
        MessageType::Resume,
        MessageType::HaltEvent,
        MessageType::Error,
    ];

    /// Types a client may send.
    pub fn is_client(self) -> bool {
        matches!(
            self,
            MessageType::Cmd | MessageType::PathLoad | MessageType::Resume
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MessageType::Hello => "hello",
            MessageType::Frame => "frame",
            MessageType::Detections => "detections",
            MessageType::Depth => "depth",
            MessageType::SnapshotMeta => "snapshot_meta",
            MessageType::Telemetry => "telemetry",
            MessageType::Pose => "pose",
            MessageType::Cmd => "cmd",
            MessageType::PathLoad => "path_load",
            MessageType::Resume => "resume",
            MessageType::HaltEvent => "halt_event",
            MessageType::Error => "error",
        }
    }
}

impl std::fmt::Display for MessageType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WireMessage {
    #[serde(rename = "type")]
    pub kind: MessageType,
    pub seq: u64,
    /// Seconds since the service started.
    pub ts: f64,
    #[serde(default = "empty_object")]
    pub payload: Value,
}

fn empty_object() -> Value {
    Value::Object(Default::default())
}

impl WireMessage {
    pub fn new<P: Serialize>(kind: MessageType, seq: u64, ts: f64, payload: &P) -> Self {
        Self {
            kind,
            seq,
            ts,
            payload: serde_json::to_value(payload).expect("payloads serialize"),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("wire messages serialize")
    }

    pub fn from_json(text: &str) -> Result<Self, ProtocolError> {
        serde_json::from_str(text)
            .map_err(|e| ProtocolError::new(ErrorCode::Malformed, e.to_string()))
    }

    pub fn payload_as<P: DeserializeOwned>(&self) -> Result<P, ProtocolError> {
        serde_json::from_value(self.payload.clone()).map_err(|e| {
            ProtocolError::new(ErrorCode::Malformed, format!("{} payload: {e}", self.kind))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HelloPayload {
    pub protocol_version: u32,
    pub detection_rate: f64,
    pub frame_rate_limit: f64,
    pub frame_width: usize,
    pub frame_height: usize,
    /// Named plans accepted by `path_load`.
    pub paths: Vec<String>,
}

/// A base64 PNG image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FramePayload {
    pub width: u32,
    pub height: u32,
    pub png: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionsPayload {
    pub snapshot_seq: u64,
    pub frame_width: usize,
    pub detections: Vec<Detection>,
}

/// Color-mapped depth preview; near is red, far is blue, invalid black.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthPayload {
    pub width: u32,
    pub height: u32,
    pub png: String,
    /// Color scale bounds in meters, absent when no pixel is valid.
    pub min_m: Option<f64>,
    pub max_m: Option<f64>,
    pub capture_ts: f64,
    pub staleness_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotMetaPayload {
    pub snapshot_seq: u64,
    pub detections_ts: f64,
    pub depth_capture_ts: Option<f64>,
    pub depth_staleness_s: Option<f64>,
    /// Worst-case staleness for the configured schedule.
    pub staleness_bound_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriveMode {
    Manual,
    Path,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosePayload {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub linear_speed: f64,
    pub angular_speed: f64,
    pub halted: bool,
    pub mode: DriveMode,
    pub path: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CmdPayload {
    pub key: String,
}

/// Either a named plan from the server's library or an inline plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathLoadPayload {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan: Option<PathPlan>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HaltEventPayload {
    pub reason: String,
    pub x: f64,
    pub y: f64,
    pub range_m: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    Malformed,
    BadSeq,
    UnknownKey,
    UnknownPath,
    InvalidPlan,
    Halted,
    NotHalted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorPayload {
    pub code: ErrorCode,
    pub message: String,
    /// `seq` of the client message that caused the error, when known.
    pub ref_seq: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("{code:?}: {message}")]
pub struct ProtocolError {
    pub code: ErrorCode,
    pub message: String,
    pub ref_seq: Option<u64>,
}

impl ProtocolError {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
            ref_seq: None,
        }
    }

    pub fn payload(&self) -> ErrorPayload {
        ErrorPayload {
            code: self.code,
            message: self.message.clone(),
            ref_seq: self.ref_seq,
        }
    }
}

/// A decoded client message.
#[derive(Debug, Clone, PartialEq)]
pub enum ClientRequest {
    Cmd { key: String },
    PathLoad(PathLoadPayload),
    Resume,
}

/// Parses one client text frame into its sequence number and request.
pub fn parse_client(text: &str) -> Result<(u64, ClientRequest), ProtocolError> {
    let msg = WireMessage::from_json(text)?;
    let with_seq = |mut e: ProtocolError| {
        e.ref_seq = Some(msg.seq);
        e
    };
    if !msg.payload.is_object() {
        return Err(with_seq(ProtocolError::new(
            ErrorCode::Malformed,
            "payload must be an object",
        )));
    }
    let req = match msg.kind {
        MessageType::Cmd => {
            let p: CmdPayload = msg.payload_as().map_err(with_seq)?;
            ClientRequest::Cmd { key: p.key }
        }
        MessageType::PathLoad => {
            let p: PathLoadPayload = msg.payload_as().map_err(with_seq)?;
            if p.name.is_some() == p.plan.is_some() {
                return Err(with_seq(ProtocolError::new(
                    ErrorCode::Malformed,
                    "path_load needs exactly one of name or plan",
                )));
            }
            ClientRequest::PathLoad(p)
        }
        MessageType::Resume => ClientRequest::Resume,
        other => {
            return Err(with_seq(ProtocolError::new(
                ErrorCode::Malformed,
                format!("clients may not send {other} messages"),
            )))
        }
    };
    Ok((msg.seq, req))
}

pub fn encode_png_base64(png: &[u8]) -> String {
    base64::engine::general_purpose::STANDARD.encode(png)
}

pub fn decode_base64(data: &str) -> Result<Vec<u8>, ProtocolError> {
    base64::engine::general_purpose::STANDARD
        .decode(data)
        .map_err(|e| ProtocolError::new(ErrorCode::Malformed, e.to_string()))
}

pub fn frame_payload(img: &GrayImage) -> FramePayload {
    FramePayload {
        width: img.width(),
        height: img.height(),
        png: encode_png_base64(&rover_core::io::encode_png(img)),
    }
}

/// Blue-to-red ramp through cyan, green and yellow, `f` in `[0, 1]`.
pub fn ramp(f: f64) -> [u8; 3] {
    let f = f.clamp(0.0, 1.0) * 4.0;
    let (r, g, b) = match f {
        f if f < 1.0 => (0.0, f, 1.0),
        f if f < 2.0 => (0.0, 1.0, 2.0 - f),
        f if f < 3.0 => (f - 2.0, 1.0, 0.0),
        f => (1.0, 4.0 - f, 0.0),
    };
    [
        (r * 255.0).round() as u8,
        (g * 255.0).round() as u8,
        (b * 255.0).round() as u8,
    ]
}

/// Downsamples by `factor` (nearest valid pixel of each block's top-left
/// corner) and color-maps near-to-far as red-to-blue.
pub fn depth_preview(depth: &DepthMap, factor: usize) -> (RgbImage, Option<(f32, f32)>) {
    let factor = factor.max(1);
    let (w, h) = (
        depth.width().div_ceil(factor),
        depth.height().div_ceil(factor),
    );
    let range = depth.min_max();
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let z = depth.get(x as usize * factor, y as usize * factor);
        match (z, range) {
            (Some(z), Some((lo, hi))) => {
                let f = if hi > lo {
                    ((z - lo) / (hi - lo)) as f64
                } else {
                    0.0
                };
                Rgb(ramp(1.0 - f))
            }
            _ => Rgb([0, 0, 0]),
        }
    });
    (img, range)
}

pub fn depth_payload(
    depth: &DepthMap,
    factor: usize,
    capture_ts: f64,
    staleness_s: f64,
) -> DepthPayload {
    let (img, range) = depth_preview(depth, factor);
    let mut png = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut png), image::ImageFormat::Png)
        .expect("in-memory PNG encoding");
    DepthPayload {
        width: img.width(),
        height: img.height(),
        png: encode_png_base64(&png),
        min_m: range.map(|r| r.0 as f64),
        max_m: range.map(|r| r.1 as f64),
        capture_ts,
        staleness_s,
    }
}
