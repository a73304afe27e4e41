//! TOML configuration shared by every subcommand. Every section is
//! optional and falls back to library defaults.

use std::path::Path;

use cabletopo::assembly::AssemblyConfig;
use cabletopo::detect::DetectConfig;
use cabletopo::eval::SweepGrid;
use cabletopo::library::LibraryConfig;
use cabletopo::metrics::MetricsConfig;
use cabletopo::nn::TrainConfig;
use cabletopo::sensor::ScanConfig;
use cabletopo::synth::CableSpec;
use serde::{Deserialize, Serialize};

use crate::files::FileError;
use crate::server::ServerConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    /// Synthetic training tiles per model.
    pub tiles: usize,
    #[serde(flatten)]
    pub params: TrainConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            tiles: 4000,
            params: TrainConfig {
                target_accuracy: Some(0.995),
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    /// Held-out test meshes generated from the library settings.
    pub meshes: usize,
    #[serde(flatten)]
    pub grid: SweepGrid,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            meshes: 2,
            grid: SweepGrid::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServeSection {
    pub bind: String,
    /// Subscribers to wait for before publishing.
    pub wait_for: usize,
    pub wait_timeout_ms: u64,
    #[serde(flatten)]
    pub server: ServerConfig,
}

impl Default for ServeSection {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:7878".into(),
            wait_for: 0,
            wait_timeout_ms: 10_000,
            server: ServerConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct AppConfig {
    pub cable: Option<CableSpec<f64>>,
    pub scan: ScanConfig,
    pub assembly: AssemblyConfig,
    pub metrics: MetricsConfig,
    pub detect: DetectConfig,
    pub library: LibraryConfig,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub serve: ServeSection,
}

impl AppConfig {
    pub fn from_toml(text: &str) -> Result<Self, FileError> {
        toml::from_str(text).map_err(|e| FileError::Toml(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, FileError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| FileError::Format {
            path: path.display().to_string(),
            msg: e.to_string(),
        })
    }

    pub fn to_toml(&self) -> Result<String, FileError> {
        toml::to_string(self).map_err(|e| FileError::Toml(e.to_string()))
    }
}
