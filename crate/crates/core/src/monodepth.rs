//! Monocular metric depth backends.
//!
//! The built-in `oracle` backend perturbs ground truth with multiplicative
//! log-normal noise and applies the range cap. Latency is reported through
//! `ready_timestamp`; enacting it is the scheduler's job.

use std::collections::HashMap;
use std::sync::Arc;

use image::GrayImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::noise::splitmix64;
use crate::raster::DepthMap;

pub const ORACLE_BACKEND: &str = "oracle";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MonoDepthError {
    #[error("backend '{0}' requires ground-truth depth")]
    MissingGroundTruth(String),
    #[error("backend id '{0}' is already registered")]
    DuplicateBackend(String),
    #[error("unknown monodepth backend '{0}'")]
    UnknownBackend(String),
    #[error("invalid monodepth config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MonoDepthConfig {
    pub backend: String,
    /// Meters; farther estimates are invalidated.
    pub max_range: f64,
    /// Seconds from capture until the estimate is usable.
    pub latency: f64,
    /// Standard deviation of the log-depth noise.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for MonoDepthConfig {
    fn default() -> Self {
        Self {
            backend: ORACLE_BACKEND.to_string(),
            max_range: 5.0,
            latency: 7.0,
            noise_sigma: 0.05,
            seed: 0,
        }
    }
}

impl MonoDepthConfig {
    pub fn validate(&self) -> Result<(), MonoDepthError> {
        if !(self.max_range > 0.0 && self.max_range.is_finite()) {
            return Err(MonoDepthError::InvalidConfig(
                "max_range must be positive".into(),
            ));
        }
        if !(self.latency >= 0.0 && self.latency.is_finite()) {
            return Err(MonoDepthError::InvalidConfig(
                "latency must be non-negative".into(),
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(MonoDepthError::InvalidConfig(
                "noise_sigma must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonoDepthResult {
    /// Meters.
    pub depth: DepthMap,
    pub capture_timestamp: f64,
    pub ready_timestamp: f64,
    pub backend_id: String,
}

/// What a backend sees of one captured frame.
#[derive(Debug, Clone, Copy)]
pub struct MonoDepthInput<'a> {
    pub image: &'a GrayImage,
    /// Ground-truth depth in meters, when the source can provide it.
    pub gt_depth_m: Option<&'a DepthMap>,
    pub capture_timestamp: f64,
}

pub trait MonoDepthBackend: Send + Sync {
    fn estimate(
        &self,
        config: &MonoDepthConfig,
        input: MonoDepthInput<'_>,
    ) -> Result<MonoDepthResult, MonoDepthError>;
}

/// Ground truth times `exp(eps)`, `eps ~ N(0, sigma^2)`, seeded by the
/// config seed and the capture timestamp.
#[derive(Debug, Clone, Copy, Default)]
pub struct OracleBackend;

fn frame_seed(seed: u64, timestamp: f64) -> u64 {
    splitmix64(seed ^ splitmix64(timestamp.to_bits()))
}

impl MonoDepthBackend for OracleBackend {
    fn estimate(
        &self,
        config: &MonoDepthConfig,
        input: MonoDepthInput<'_>,
    ) -> Result<MonoDepthResult, MonoDepthError> {
        config.validate()?;
        let gt = input
            .gt_depth_m
            .ok_or_else(|| MonoDepthError::MissingGroundTruth(ORACLE_BACKEND.into()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(frame_seed(config.seed, input.capture_timestamp));
        let normal = (config.noise_sigma > 0.0)
            .then(|| Normal::new(0.0, config.noise_sigma).expect("sigma validated"));
        let max_range = config.max_range;
        let values = gt.values().map(|&z| {
            let eps = normal.as_ref().map_or(0.0, |n| n.sample(&mut rng));
            if !(z.is_finite() && z > 0.0) {
                return DepthMap::INVALID;
            }
            let est = z as f64 * eps.exp();
            if est > max_range {
                DepthMap::INVALID
            } else {
                est as f32
            }
        });
        Ok(MonoDepthResult {
            depth: DepthMap::new(values),
            capture_timestamp: input.capture_timestamp,
            ready_timestamp: input.capture_timestamp + config.latency,
            backend_id: ORACLE_BACKEND.into(),
        })
    }
}

/// Backends selectable by id from configuration.
#[derive(Clone)]
pub struct BackendRegistry {
    backends: HashMap<String, Arc<dyn MonoDepthBackend>>,
}

impl std::fmt::Debug for BackendRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mut ids: Vec<_> = self.backends.keys().collect();
        ids.sort();
        f.debug_struct("BackendRegistry")
            .field("ids", &ids)
            .finish()
    }
}

impl BackendRegistry {
    pub fn empty() -> Self {
        Self {
            backends: HashMap::new(),
        }
    }

    /// Registry holding the `oracle` backend.
    pub fn with_builtin() -> Self {
        let mut r = Self::empty();
        r.register(ORACLE_BACKEND, Arc::new(OracleBackend))
            .expect("fresh registry");
        r
    }

    pub fn register(
        &mut self,
        id: &str,
        backend: Arc<dyn MonoDepthBackend>,
    ) -> Result<(), MonoDepthError> {
        if self.backends.contains_key(id) {
            return Err(MonoDepthError::DuplicateBackend(id.into()));
        }
        self.backends.insert(id.into(), backend);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Result<Arc<dyn MonoDepthBackend>, MonoDepthError> {
        self.backends
            .get(id)
            .cloned()
            .ok_or_else(|| MonoDepthError::UnknownBackend(id.into()))
    }

    /// Resolves the backend named by `config`, validating the config too.
    pub fn select(
        &self,
        config: &MonoDepthConfig,
    ) -> Result<Arc<dyn MonoDepthBackend>, MonoDepthError> {
        config.validate()?;
        self.get(&config.backend)
    }
}

impl Default for BackendRegistry {
    fn default() -> Self {
        Self::with_builtin()
    }
}

/// Convenience wrapper around the registry lookup and estimate.
pub fn estimate(
    registry: &BackendRegistry,
    config: &MonoDepthConfig,
    input: MonoDepthInput<'_>,
) -> Result<MonoDepthResult, MonoDepthError> {
    registry.select(config)?.estimate(config, input)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::Grid;

    fn gt(values: Vec<f32>) -> DepthMap {
        let n = values.len();
        DepthMap::new(Grid::from_vec(n, 1, values))
    }

    fn run(cfg: &MonoDepthConfig, depth: &DepthMap, t: f64) -> MonoDepthResult {
        let img = GrayImage::new(depth.width() as u32, depth.height() as u32);
        OracleBackend
            .estimate(
                cfg,
                MonoDepthInput {
                    image: &img,
                    gt_depth_m: Some(depth),
                    capture_timestamp: t,
                },
            )
            .unwrap()
    }

    #[test]
    fn zero_noise_is_identity() {
        let cfg = MonoDepthConfig {
            noise_sigma: 0.0,
            ..Default::default()
        };
        let g = gt(vec![0.2, 1.0, 4.99, 5.0]);
        let r = run(&cfg, &g, 3.0);
        assert_eq!(r.depth, g);
        assert_eq!(r.depth.valid_count(), 4);
    }

    #[test]
    fn range_cap_invalidates() {
        let cfg = MonoDepthConfig {
            noise_sigma: 0.0,
            ..Default::default()
        };
        let r = run(&cfg, &gt(vec![8.0, 1.0, f32::INFINITY]), 0.0);
        assert!(r.depth.get(0, 0).is_none());
        assert_eq!(r.depth.get(1, 0), Some(1.0));
        assert!(r.depth.get(2, 0).is_none());
    }

    #[test]
    fn ready_is_capture_plus_latency() {
        let r = run(&MonoDepthConfig::default(), &gt(vec![1.0]), 10.0);
        assert_eq!(r.capture_timestamp, 10.0);
        assert_eq!(r.ready_timestamp, 17.0);
        assert_eq!(r.backend_id, "oracle");
    }

    #[test]
    fn deterministic_per_seed_and_timestamp() {
        let cfg = MonoDepthConfig::default();
        let g = gt(vec![1.0; 64]);
        let bits = |r: &MonoDepthResult| {
            r.depth
                .values()
                .as_slice()
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>()
        };
        assert_eq!(bits(&run(&cfg, &g, 2.5)), bits(&run(&cfg, &g, 2.5)));
        assert_ne!(bits(&run(&cfg, &g, 2.5)), bits(&run(&cfg, &g, 3.5)));
        let other = MonoDepthConfig {
            seed: 9,
            ..cfg.clone()
        };
        assert_ne!(bits(&run(&cfg, &g, 2.5)), bits(&run(&other, &g, 2.5)));
    }

    #[test]
    fn valid_output_never_exceeds_range() {
        let cfg = MonoDepthConfig {
            noise_sigma: 0.3,
            max_range: 2.0,
            ..Default::default()
        };
        let g = gt((0..5000).map(|i| 0.5 + i as f32 * 0.0005).collect());
        let r = run(&cfg, &g, 1.0);
        assert!(r
            .depth
            .values()
            .as_slice()
            .iter()
            .all(|&v| !v.is_finite() || v <= 2.0));
    }

    #[test]
    fn missing_ground_truth() {
        let img = GrayImage::new(2, 2);
        let err = OracleBackend
            .estimate(
                &MonoDepthConfig::default(),
                MonoDepthInput {
                    image: &img,
                    gt_depth_m: None,
                    capture_timestamp: 0.0,
                },
            )
            .unwrap_err();
        assert_eq!(err, MonoDepthError::MissingGroundTruth("oracle".into()));
    }

    #[test]
    fn registry_lookup() {
        let mut r = BackendRegistry::with_builtin();
        assert!(r.get("oracle").is_ok());
        assert_eq!(
            r.register("oracle", Arc::new(OracleBackend)).unwrap_err(),
            MonoDepthError::DuplicateBackend("oracle".into())
        );
        let cfg = MonoDepthConfig {
            backend: "external".into(),
            ..Default::default()
        };
        assert!(matches!(
            r.select(&cfg),
            Err(MonoDepthError::UnknownBackend(_))
        ));
        r.register("external", Arc::new(OracleBackend)).unwrap();
        assert!(r.select(&cfg).is_ok());
    }

    #[test]
    fn invalid_config_rejected() {
        for cfg in [
            MonoDepthConfig {
                max_range: 0.0,
                ..Default::default()
            },
            MonoDepthConfig {
                latency: -1.0,
                ..Default::default()
            },
            MonoDepthConfig {
                noise_sigma: -0.1,
                ..Default::default()
            },
        ] {
            assert!(cfg.validate().is_err());
        }
    }
}
