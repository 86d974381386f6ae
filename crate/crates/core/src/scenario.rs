//! Declarative scenario file (TOML): physics, impedance bounds, tracker,
//! teleoperation, episode and requirement settings. Every key is optional and
//! unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::canonical;
use crate::impedance::ImpedanceProfile;
use crate::se3::Pose;
use crate::sim::{SceneConfig, SimConfig};
use crate::teleop::TeleopConfig;
use crate::tracker::{default_alpha_thr, NoiseSpec, TrackerConfig};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read scenario {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed scenario: {0}")]
    Parse(String),
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

/// How leader poses enter the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoseMode {
    /// Pose samples are the interface ground truth; the gateway synthesizes
    /// marker observations from them and fuses those.
    #[default]
    Markers,
    /// Pose samples are already fused and used as is.
    Direct,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackerSection {
    pub mode: PoseMode,
    pub camera_in_world: Pose,
    pub alpha_thr: f64,
    pub stale_timeout: f64,
    pub noise: NoiseSpec,
}

impl Default for TrackerSection {
    fn default() -> Self {
        let cfg = TrackerConfig::default();
        Self {
            mode: PoseMode::Markers,
            camera_in_world: cfg.camera_in_world,
            alpha_thr: default_alpha_thr(),
            stale_timeout: cfg.stale_timeout,
            noise: NoiseSpec::noiseless(),
        }
    }
}

impl TrackerSection {
    pub fn config(&self) -> TrackerConfig {
        TrackerConfig {
            camera_in_world: self.camera_in_world,
            alpha_thr: self.alpha_thr,
            stale_timeout: self.stale_timeout,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodeSection {
    pub seed: u64,
    /// Hard cap on simulated episode time (s).
    pub max_duration: f64,
    /// Log every n-th simulation step.
    pub log_decimation: u32,
    /// Telemetry publication rate of the live server (Hz).
    pub telemetry_rate: f64,
    /// Records between explicit flushes of the episode file.
    pub flush_every: u32,
}

impl Default for EpisodeSection {
    fn default() -> Self {
        Self {
            seed: 0,
            max_duration: 60.0,
            log_decimation: 1,
            telemetry_rate: 20.0,
            flush_every: 1000,
        }
    }
}

/// Thresholds for the per-phase impedance requirements.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RequirementThresholds {
    /// Mean k_t must stay below this while reaching and aligning (N/m).
    pub kt_low: f64,
    /// Mean k_t must exceed this while transporting and inserting (N/m).
    pub kt_high: f64,
    /// Mean k_r must stay below this while inserting (N*m/rad).
    pub kr_low: f64,
}

impl Default for RequirementThresholds {
    fn default() -> Self {
        Self {
            kt_low: 600.0,
            kt_high: 1200.0,
            kr_low: 40.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub sim: SimConfig,
    pub scene: SceneConfig,
    pub impedance: ImpedanceProfile,
    pub tracker: TrackerSection,
    pub teleop: TeleopConfig,
    pub episode: EpisodeSection,
    pub requirements: RequirementThresholds,
}

#[derive(Serialize)]
struct Physics<'a> {
    sim: &'a SimConfig,
    scene: &'a SceneConfig,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Scenario {
    pub fn from_toml_str(text: &str) -> Result<Self, ScenarioError> {
        let mut scenario: Scenario = toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        scenario.sim.ee_start = scenario.sim.ee_start.normalized();
        scenario.scene.hole_pose = scenario.scene.hole_pose.normalized();
        scenario.scene.peg_start_pose = scenario.scene.peg_start_pose.normalized();
        scenario.tracker.camera_in_world = scenario.tracker.camera_in_world.normalized();
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("scenario is always representable in TOML")
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let invalid = |e: &dyn std::fmt::Display| ScenarioError::Invalid(e.to_string());
        self.sim.validate().map_err(|e| invalid(&e))?;
        self.scene.validate().map_err(|e| invalid(&e))?;
        self.impedance.validate().map_err(|e| invalid(&e))?;
        self.tracker.config().validate().map_err(|e| invalid(&e))?;
        let ep = &self.episode;
        if !(ep.max_duration > 0.0 && ep.max_duration.is_finite()) {
            return Err(ScenarioError::Invalid("episode.max_duration must be positive".into()));
        }
        if ep.log_decimation == 0 || ep.flush_every == 0 {
            return Err(ScenarioError::Invalid("episode.log_decimation and flush_every must be >= 1".into()));
        }
        if !(ep.telemetry_rate > 0.0) {
            return Err(ScenarioError::Invalid("episode.telemetry_rate must be positive".into()));
        }
        if !(self.teleop.f_sat > 0.0) {
            return Err(ScenarioError::Invalid("teleop.f_sat must be positive".into()));
        }
        Ok(())
    }

    /// Content hash of everything that determines the simulated dynamics.
    pub fn scenario_digest(&self) -> String {
        let physics = Physics {
            sim: &self.sim,
            scene: &self.scene,
        };
        sha256_hex(&canonical::to_vec(&physics))
    }

    /// Content hash of the whole scenario.
    pub fn config_digest(&self) -> String {
        sha256_hex(&canonical::to_vec(self))
    }
}
