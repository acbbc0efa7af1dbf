use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::propagation::ImuNoise;
use crate::observability::ObsConfig;
use crate::sim::SimConfig;
use crate::uwb_init::{CovarianceModel, InitParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Visual-inertial only; UWB streams are ignored.
    Vio,
    /// Ranging Jacobians at the current estimate.
    Viro,
    /// Ranging Jacobians at first estimates.
    FejViro,
    /// As `FejViro`, with anchors initialized from buffered poses outside the state.
    FejViroS,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Vio, Mode::Viro, Mode::FejViro, Mode::FejViroS];

    pub fn name(&self) -> &'static str {
        match self {
            Mode::Vio => "vio",
            Mode::Viro => "viro",
            Mode::FejViro => "fej-viro",
            Mode::FejViroS => "fej-viro-s",
        }
    }

    pub fn uses_uwb(&self) -> bool {
        *self != Mode::Vio
    }

    pub fn fej_ranging(&self) -> bool {
        matches!(self, Mode::FejViro | Mode::FejViroS)
    }

    pub fn covariance_model(&self) -> CovarianceModel {
        if *self == Mode::FejViroS {
            CovarianceModel::Standalone
        } else {
            CovarianceModel::Joint
        }
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode {s:?} (expected vio, viro, fej-viro or fej-viro-s)")))
    }
}

/// Initial standard deviations of the filter, also used to perturb the
/// initial estimate away from the truth.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InitialSigma {
    pub roll_pitch: f64,
    pub yaw: f64,
    pub position: f64,
    pub velocity: f64,
    pub gyro_bias: f64,
    pub accel_bias: f64,
}

impl Default for InitialSigma {
    fn default() -> Self {
        InitialSigma { roll_pitch: 0.01, yaw: 0.03, position: 0.02, velocity: 0.02, gyro_bias: 1e-3, accel_bias: 1e-2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    pub imu_noise: ImuNoise,
    pub init: InitParams,
    pub max_clones: usize,
    pub max_keyframes: usize,
    pub initial_sigma: InitialSigma,
    /// Sample the initial estimate from the initial covariance.
    pub perturb_initial: bool,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            imu_noise: ImuNoise::default(),
            init: InitParams::default(),
            max_clones: 11,
            max_keyframes: 150,
            initial_sigma: InitialSigma::default(),
            perturb_initial: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub mode: Mode,
    pub sim: SimConfig,
    pub filter: FilterConfig,
    pub runs: usize,
    pub obs: ObsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig { mode: Mode::FejViro, sim: SimConfig::default(), filter: FilterConfig::default(), runs: 20, obs: ObsConfig::default() }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}
