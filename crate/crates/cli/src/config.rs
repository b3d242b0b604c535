//! TOML configuration shared by every command.
//!
//! Each section mirrors a library configuration type. Unknown keys are
//! rejected, missing keys take their defaults, and command-line flags are
//! applied on top before the effective configuration is echoed.

use std::path::Path;

use puie_core::datagen::{AdjustmentSpec, Method};
use puie_core::{NetworkConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub dataset: DatasetConfig,
    pub enhance: EnhanceConfig,
}

impl CliConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(CliConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
                Self::from_toml(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))
            }
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes to TOML")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let cfg = |e: puie_core::Error| CliError::Config(e.to_string());
        self.network.validate().map_err(cfg)?;
        self.train.validate(&self.network).map_err(cfg)?;
        self.dataset.specs().map_err(cfg)?;
        if self.enhance.samples == 0 {
            return Err(CliError::Config("enhance.samples must be at least 1".into()));
        }
        if self.enhance.grid_columns == 0 {
            return Err(CliError::Config("enhance.grid_columns must be at least 1".into()));
        }
        Ok(())
    }
}

/// Over and under coefficients for each reference adjustment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub contrast: [f64; 2],
    pub saturation: [f64; 2],
    pub gamma: [f64; 2],
    /// Weight of the clipped-pixel fraction in the selection score.
    pub clip_penalty: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        let d = AdjustmentSpec::defaults();
        let pair = |i: usize| [d[i].alpha_over, d[i].alpha_under];
        DatasetConfig { contrast: pair(0), saturation: pair(1), gamma: pair(2), clip_penalty: 10.0 }
    }
}

impl DatasetConfig {
    pub fn specs(&self) -> puie_core::Result<Vec<AdjustmentSpec>> {
        [(Method::Contrast, self.contrast), (Method::Saturation, self.saturation), (Method::Gamma, self.gamma)]
            .into_iter()
            .map(|(m, [o, u])| AdjustmentSpec::new(m, o, u))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum EnhanceMode {
    Samples,
    #[default]
    Mc,
    Mp,
    Mode,
    Quality,
}

impl EnhanceMode {
    pub fn name(self) -> &'static str {
        match self {
            EnhanceMode::Samples => "samples",
            EnhanceMode::Mc => "mc",
            EnhanceMode::Mp => "mp",
            EnhanceMode::Mode => "mode",
            EnhanceMode::Quality => "quality",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnhanceConfig {
    /// Number of prior samples; also the MC sample count.
    pub samples: usize,
    pub mode: EnhanceMode,
    pub seed: u64,
    /// Write a tiled montage next to the individual samples.
    pub grid: bool,
    pub grid_columns: usize,
}

impl Default for EnhanceConfig {
    fn default() -> Self {
        EnhanceConfig { samples: 20, mode: EnhanceMode::Mc, seed: 0, grid: true, grid_columns: 5 }
    }
}
