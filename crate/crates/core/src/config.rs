//! Keyed TOML configuration for the engine and the monitor process.
//!
//! ```toml
//! [stream]
//! interval_minutes = 1
//! gap_policy = "mark"
//!
//! [model]
//! stp = [15, 30, 60, 120, 300, 480, 720]
//! alpha = 0.05
//! history_days = 14
//! coefficients = "coefficients.csv"
//!
//! [detector]
//! pseudo_zero = 0.1
//! steady_window = 120
//!
//! [server]
//! bind = "127.0.0.1:8080"
//! snapshot = "state/snapshot.json"
//! ```
//!
//! Every key is optional. Relative paths resolve against the directory of
//! the configuration file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detect::engine::{Engine, EngineError, EngineSettings};
use crate::detect::DetectorConfig;
use crate::md::{CoefficientTable, MdError, StpVector};
use crate::metering::GapPolicy;
use crate::pattern::LEARNING_DAYS;
use crate::stats::Significance;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("invalid configuration {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error(transparent)]
    Md(#[from] MdError),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamConfig {
    pub interval_minutes: u32,
    pub gap_policy: GapPolicy,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            interval_minutes: 1,
            gap_policy: GapPolicy::Mark,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub stp: StpVector,
    pub alpha: Significance,
    pub history_days: u32,
    /// Coefficient table; the bundled defaults when absent.
    pub coefficients: Option<PathBuf>,
    pub evaluation_log: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            stp: StpVector::stp1(),
            alpha: Significance::Alpha05,
            history_days: LEARNING_DAYS,
            coefficients: None,
            evaluation_log: 4096,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerConfig {
    pub bind: String,
    pub snapshot: PathBuf,
    /// Stream minutes between snapshots.
    pub snapshot_every_minutes: u32,
    /// Static bearer token; no authentication when absent.
    pub token: Option<String>,
    /// Directory of dashboard assets served under `/`.
    pub static_dir: Option<PathBuf>,
    /// Replay pacing: stream minutes per wall-clock second, 0 = as fast as possible.
    pub replay_speed: f64,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8080".into(),
            snapshot: PathBuf::from("state/snapshot.json"),
            snapshot_every_minutes: 10,
            token: None,
            static_dir: None,
            replay_speed: 0.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub stream: StreamConfig,
    pub model: ModelConfig,
    pub detector: DetectorConfig,
    pub server: ServerConfig,
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

impl EngineConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: PathBuf::from("<inline>"),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let mut cfg: Self = toml::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        cfg.base_dir = path.parent().map(Path::to_path_buf);
        cfg.settings()?.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// Resolve a configured path against the configuration file location.
    pub fn resolve(&self, p: &Path) -> PathBuf {
        match &self.base_dir {
            Some(base) if p.is_relative() => base.join(p),
            _ => p.to_path_buf(),
        }
    }

    pub fn settings(&self) -> Result<EngineSettings, ConfigError> {
        let s = EngineSettings {
            interval_minutes: self.stream.interval_minutes,
            gap_policy: self.stream.gap_policy,
            stp: self.model.stp.clone(),
            alpha: self.model.alpha,
            detector: self.detector.clone(),
            history_days: self.model.history_days,
            evaluation_log: self.model.evaluation_log,
        };
        Ok(s)
    }

    pub fn coefficients(&self) -> Result<CoefficientTable, ConfigError> {
        let table = match &self.model.coefficients {
            Some(p) => CoefficientTable::load(&self.resolve(p))?,
            None => CoefficientTable::defaults(),
        };
        table.validate_for(&self.model.stp)?;
        Ok(table)
    }

    pub fn snapshot_path(&self) -> PathBuf {
        self.resolve(&self.server.snapshot)
    }

    pub fn build_engine(&self) -> Result<Engine, ConfigError> {
        Ok(Engine::new(self.settings()?, self.coefficients()?)?)
    }
}
