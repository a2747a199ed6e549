//! Application config: the simulation sections plus a `server` section,
//! loaded from one JSON file.

use std::collections::BTreeMap;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use rover_core::rover::PathPlan;
use rover_core::sim::SimConfig;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerConfig {
    pub listen: String,
    /// Upper bound on per-client pushes of frames, detections, depth,
    /// pose and telemetry, in Hz.
    pub frame_rate_limit: f64,
    /// Block size of the depth preview.
    pub depth_downsample: usize,
    /// Queue length per client for droppable messages.
    pub client_buffer: usize,
    /// Named plans available to `path_load`.
    pub paths: BTreeMap<String, PathPlan>,
    /// Directory of `<name>.json` plans merged into `paths`.
    pub paths_dir: Option<PathBuf>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            listen: "127.0.0.1:8765".into(),
            frame_rate_limit: 10.0,
            depth_downsample: 2,
            client_buffer: 32,
            paths: BTreeMap::new(),
            paths_dir: None,
        }
    }
}

impl ServerConfig {
    pub fn validate(&self) -> Result<SocketAddr, CliError> {
        let addr: SocketAddr = self
            .listen
            .parse()
            .map_err(|e| CliError::Validation(format!("server.listen {:?}: {e}", self.listen)))?;
        if !(self.frame_rate_limit > 0.0 && self.frame_rate_limit.is_finite()) {
            return Err(CliError::Validation(
                "server.frame_rate_limit must be positive".into(),
            ));
        }
        if self.depth_downsample == 0 || self.client_buffer == 0 {
            return Err(CliError::Validation(
                "server.depth_downsample and server.client_buffer must be at least 1".into(),
            ));
        }
        for (name, plan) in &self.paths {
            plan.validate()
                .map_err(|e| CliError::Validation(format!("server.paths.{name}: {e}")))?;
        }
        Ok(addr)
    }

    /// Inline plans plus every `*.json` plan in `paths_dir`, keyed by file
    /// stem. Inline plans win on a name clash.
    pub fn path_library(&self) -> Result<BTreeMap<String, PathPlan>, CliError> {
        let mut out = BTreeMap::new();
        if let Some(dir) = &self.paths_dir {
            let entries =
                fs::read_dir(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
            let mut files: Vec<PathBuf> = entries
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "json"))
                .collect();
            files.sort();
            for p in files {
                let name = p
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .unwrap_or_default()
                    .to_string();
                out.insert(name, load_plan(&p)?);
            }
        }
        out.extend(self.paths.clone());
        Ok(out)
    }
}

pub fn load_plan(path: &Path) -> Result<PathPlan, CliError> {
    let text =
        fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    PathPlan::from_json(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

/// Sections `scene`, `rig`, `sgm`, `monodepth`, `detector`, `schedule`,
/// `rover`, `safety`, `telemetry` and `server`; all optional.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct AppConfig {
    #[serde(flatten)]
    pub sim: SimConfig,
    pub server: ServerConfig,
}

const SECTIONS: [&str; 10] = [
    "scene",
    "rig",
    "sgm",
    "monodepth",
    "detector",
    "schedule",
    "rover",
    "safety",
    "telemetry",
    "server",
];

impl AppConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let raw: serde_json::Value =
            serde_json::from_str(text).map_err(|e| CliError::Validation(format!("config: {e}")))?;
        let obj = raw
            .as_object()
            .ok_or_else(|| CliError::Validation("config must be a JSON object".into()))?;
        if let Some(k) = obj.keys().find(|k| !SECTIONS.contains(&k.as_str())) {
            return Err(CliError::Validation(format!(
                "unknown config section {k:?}; expected one of {}",
                SECTIONS.join(", ")
            )));
        }
        serde_json::from_value(raw).map_err(|e| CliError::Validation(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            CliError::Validation(m) => CliError::Validation(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Loads `path` when given, defaults otherwise.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self, CliError> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.sim
            .validate()
            .map_err(|e| CliError::Validation(e.to_string()))?;
        self.server.validate()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sections_round_trip() {
        let mut cfg = AppConfig::default();
        cfg.server.frame_rate_limit = 5.0;
        cfg.sim.safety.stop_range = 0.7;
        let text = serde_json::to_string(&cfg).unwrap();
        let back = AppConfig::from_json(&text).unwrap();
        assert_eq!(back.server, cfg.server);
        assert_eq!(back.sim.safety, cfg.sim.safety);
        back.validate().unwrap();
    }

    #[test]
    fn partial_and_bad_configs() {
        let cfg = AppConfig::from_json(r#"{"server":{"listen":"0.0.0.0:9000"}}"#).unwrap();
        assert_eq!(cfg.server.frame_rate_limit, 10.0);
        assert!(matches!(
            AppConfig::from_json(r#"{"sevrer":{}}"#),
            Err(CliError::Validation(_))
        ));
        assert!(matches!(
            AppConfig::from_json("[1]"),
            Err(CliError::Validation(_))
        ));
        let bad = AppConfig::from_json(r#"{"server":{"listen":"nowhere"}}"#).unwrap();
        assert!(bad.validate().is_err());
        let bad = AppConfig::from_json(r#"{"server":{"frame_rate_limit":0}}"#).unwrap();
        assert!(bad.validate().is_err());
    }
}
