//! Run configuration, stored as TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::bev::{GridSpec, LidarConfig};
use crate::diffusion::ScheduleKind;
use crate::metrics::MetricsConfig;
use crate::scenario::ScenarioConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("config value out of range: {0}")]
    Range(String),
}

/// Which conditioning channels reach the encoder. LiDAR is always present.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Modalities {
    pub route: bool,
    pub history: bool,
}

impl Default for Modalities {
    fn default() -> Self {
        Self {
            route: true,
            history: true,
        }
    }
}

impl Modalities {
    pub const LIDAR: Self = Self {
        route: false,
        history: false,
    };
    pub const LIDAR_ROUTE: Self = Self {
        route: true,
        history: false,
    };
    pub const ALL: Self = Self {
        route: true,
        history: true,
    };

    pub fn label(&self) -> &'static str {
        match (self.route, self.history) {
            (false, false) => "L",
            (true, false) => "L+M",
            (false, true) => "L+H",
            (true, true) => "L+M+H",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train_samples: usize,
    pub test_samples: usize,
    pub dir: PathBuf,
    pub scenario: ScenarioConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Half width of the route corridor raster, meters.
    pub route_halfwidth: f64,
    /// Half width of the ground-truth road mask, meters.
    pub mask_halfwidth: f64,
    /// Meters per normalized trajectory unit.
    pub scale: f64,
    pub time_dim: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub schedule: ScheduleKind,
    pub candidates: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lambda_road: f64,
    pub modalities: Modalities,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub grid: GridSpec,
    pub lidar: LidarConfig,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub diffusion: DiffusionConfig,
    pub train: TrainConfig,
    pub eval: MetricsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            grid: GridSpec::default(),
            lidar: LidarConfig::default(),
            data: DataConfig {
                train_samples: 512,
                test_samples: 128,
                dir: PathBuf::from("data"),
                scenario: ScenarioConfig::default(),
            },
            model: ModelConfig {
                route_halfwidth: 3.0,
                mask_halfwidth: 3.0,
                scale: 32.0,
                time_dim: 32,
                width: 32,
            },
            diffusion: DiffusionConfig {
                steps: 10,
                schedule: ScheduleKind::Cosine,
                candidates: 5,
            },
            train: TrainConfig {
                epochs: 40,
                batch_size: 8,
                learning_rate: 3e-3,
                lambda_road: 0.1,
                modalities: Modalities::default(),
            },
            eval: MetricsConfig::default(),
        }
    }
}

impl RunConfig {
    /// Training schedule used for full-scale reproduction runs.
    pub fn full_scale() -> Self {
        let mut c = Self::default();
        c.train.epochs = 120;
        c
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    /// Canonical serialization; field order is fixed by the struct layout.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical serialization, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let range = |ok: bool, msg: &str| if ok { Ok(()) } else { Err(ConfigError::Range(msg.to_string())) };
        self.grid.validate().map_err(|e| ConfigError::Range(e.to_string()))?;
        range(self.grid.height % 16 == 0 && self.grid.width % 16 == 0, "grid dimensions must be multiples of 16")?;
        range(self.lidar.z_min < self.lidar.z_max && self.lidar.density_cap > 0, "lidar z range and density cap")?;
        self.data
            .scenario
            .validate()
            .map_err(|e| ConfigError::Range(e.to_string()))?;
        range(self.data.train_samples > 0 && self.data.test_samples > 0, "sample counts must be positive")?;
        let m = &self.model;
        range(m.route_halfwidth > 0.0 && m.mask_halfwidth > 0.0, "halfwidths must be positive")?;
        range(m.scale > 0.0 && m.scale.is_finite(), "scale must be positive")?;
        range(m.time_dim > 0 && m.time_dim % 2 == 0, "time_dim must be even")?;
        range(m.width > 0, "width must be positive")?;
        range((1..=1000).contains(&self.diffusion.steps), "steps must be in 1..=1000")?;
        range(self.diffusion.candidates >= 1, "candidates must be at least 1")?;
        let t = &self.train;
        range(t.epochs >= 1 && t.batch_size >= 1, "epochs and batch size must be positive")?;
        range(t.learning_rate > 0.0 && t.learning_rate.is_finite(), "learning rate must be positive")?;
        range(t.lambda_road >= 0.0 && t.lambda_road.is_finite(), "lambda_road must be non-negative")?;
        range(self.eval.hit_threshold > 0.0, "hit threshold must be positive")?;
        Ok(())
    }
}
