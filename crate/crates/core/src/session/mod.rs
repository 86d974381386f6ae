//! Episode files: one header line followed by one state-action record per
//! logged step, in canonical JSON.
//!
//! A record holds the world state at `t` together with the action that was
//! applied from `t` until the next record, so feeding the actions back into a
//! simulator started from the header's initial state reproduces the states.

mod replay;
mod requirements;
mod validate;
mod writer;

use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::impedance::{expand, ImpedanceError};
use crate::scenario::Scenario;
use crate::se3::{Pose, Twist, Wrench};
use crate::sim::{Commands, Phase, World, WorldState};
use crate::teleop::GripperState;

pub use replay::{replay, replay_unchecked, ReplayReport};
pub use requirements::{check_requirements, PhaseStats, RequirementReport, RequirementResult, Verdict};
pub use validate::{validate, validate_file, ValidationReport, Violation, ViolationKind};
pub use writer::EpisodeWriter;

pub const SCHEMA: &str = "teleimp-episode";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum LogError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("record at t = {t} does not follow t = {last}")]
    Ordering { t: f64, last: f64 },
    #[error("episode writer is closed")]
    Closed,
    #[error("line {line}: {detail}")]
    Parse { line: usize, detail: String },
    #[error("empty episode file")]
    Empty,
    #[error("unsupported schema {found:?}, expected {SCHEMA} v{SCHEMA_VERSION}")]
    Schema { found: String },
    #[error("incompatible scenario: episode recorded with {recorded}, simulator has {current}")]
    IncompatibleScenario { recorded: String, current: String },
    #[error("logged action is invalid: {0}")]
    Action(#[from] ImpedanceError),
    #[error("replay diverged: {0}")]
    Sim(#[from] crate::sim::SimError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeHeader {
    pub schema: String,
    pub schema_version: u32,
    pub episode_id: String,
    /// Hash of the physics configuration (simulator and scene).
    pub scenario_digest: String,
    /// Hash of the complete scenario.
    pub config_digest: String,
    pub seed: u64,
    /// Unix time (s) the episode started, absent for reproducible runs.
    pub start_wall_time: Option<f64>,
    pub dt: f64,
    pub decimation: u32,
    pub scenario: Scenario,
    pub initial_state: WorldState,
}

impl EpisodeHeader {
    pub fn new(scenario: &Scenario, episode_id: String, start_wall_time: Option<f64>, initial_state: WorldState) -> Self {
        Self {
            schema: SCHEMA.to_string(),
            schema_version: SCHEMA_VERSION,
            episode_id,
            scenario_digest: scenario.scenario_digest(),
            config_digest: scenario.config_digest(),
            seed: scenario.episode.seed,
            start_wall_time,
            dt: scenario.sim.dt,
            decimation: scenario.episode.log_decimation,
            scenario: *scenario,
            initial_state,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepRecord {
    pub t: f64,
    /// Simulator step counter at `t`.
    pub step: u64,
    pub ee_pose: Pose,
    pub ee_twist: Twist,
    pub ext_wrench: Wrench,
    pub peg_pose: Pose,
    pub hole_pose: Pose,
    pub gripper: GripperState,
    pub action_goal_pose: Pose,
    pub action_kt: f64,
    pub action_kr: f64,
    /// Damping diagonal `(x, y, z, rx, ry, rz)` that accompanied the gains.
    pub action_damping: Option<[f64; 6]>,
    pub scale: f64,
    pub clutch_engaged: bool,
    pub vibro: f64,
    pub phase: Phase,
    /// Reserved for camera frame ids; always null here.
    pub frame_static: Option<u64>,
    pub frame_wrist: Option<u64>,
}

/// Operator-side quantities logged alongside the world state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatorSnapshot {
    pub scale: f64,
    pub clutch_engaged: bool,
    pub vibro: f64,
}

impl StepRecord {
    pub fn capture(world: &World, ext_wrench: Wrench, action: &Commands, op: OperatorSnapshot) -> Self {
        let ee = world.ee();
        let peg = world.peg();
        Self {
            t: world.t(),
            step: world.steps(),
            ee_pose: ee.pose,
            ee_twist: ee.twist,
            ext_wrench,
            peg_pose: peg.pose,
            hole_pose: world.scene().hole_pose,
            gripper: action.gripper,
            action_goal_pose: action.goal,
            action_kt: action.impedance.k_t,
            action_kr: action.impedance.k_r,
            action_damping: Some(action.impedance.d_diag),
            scale: op.scale,
            clutch_engaged: op.clutch_engaged,
            vibro: op.vibro,
            phase: world.status().phase,
            frame_static: None,
            frame_wrist: None,
        }
    }

    /// The action as simulator commands, re-expanded under `scenario`'s bounds.
    pub fn commands(&self, scenario: &Scenario) -> Result<Commands, ImpedanceError> {
        Ok(Commands {
            goal: self.action_goal_pose,
            impedance: expand(self.action_kt, self.action_kr, &scenario.impedance)?,
            gripper: self.gripper,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub header: EpisodeHeader,
    pub records: Vec<StepRecord>,
    /// Set when the final line could not be parsed and was dropped.
    pub truncated_tail: Option<DamagedLine>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DamagedLine {
    pub line: usize,
    pub detail: String,
}

fn parse_line<T: serde::de::DeserializeOwned>(text: &str, line: usize) -> Result<T, LogError> {
    serde_json::from_str(text).map_err(|e| LogError::Parse {
        line,
        detail: e.to_string(),
    })
}

fn parse_header(text: &str) -> Result<EpisodeHeader, LogError> {
    let value: serde_json::Value = parse_line(text, 1)?;
    let schema = value.get("schema").and_then(|v| v.as_str()).unwrap_or("");
    let version = value.get("schema_version").and_then(|v| v.as_u64());
    if schema != SCHEMA || version != Some(u64::from(SCHEMA_VERSION)) {
        return Err(LogError::Schema {
            found: format!("{schema} v{}", version.map_or("?".to_string(), |v| v.to_string())),
        });
    }
    serde_json::from_value(value).map_err(|e| LogError::Parse {
        line: 1,
        detail: e.to_string(),
    })
}

/// Reads an episode. A damaged final line is tolerated and reported in
/// `truncated_tail`; any other unparseable line is an error.
pub fn read_episode<R: BufRead>(input: R) -> Result<Episode, LogError> {
    let mut lines = input.lines();
    let header = match lines.next() {
        Some(line) => parse_header(&line?)?,
        None => return Err(LogError::Empty),
    };
    let mut records = Vec::new();
    let mut pending: Option<DamagedLine> = None;
    for (i, line) in lines.enumerate() {
        let line = line?;
        if let Some(d) = pending.take() {
            return Err(LogError::Parse {
                line: d.line,
                detail: d.detail,
            });
        }
        if line.is_empty() {
            continue;
        }
        match parse_line::<StepRecord>(&line, i + 2) {
            Ok(r) => records.push(r),
            Err(LogError::Parse { line, detail }) => pending = Some(DamagedLine { line, detail }),
            Err(e) => return Err(e),
        }
    }
    if let Some(d) = &pending {
        tracing::warn!("dropping damaged final record at line {}: {}", d.line, d.detail);
    }
    Ok(Episode {
        header,
        records,
        truncated_tail: pending,
    })
}

pub fn read_episode_file(path: &Path) -> Result<Episode, LogError> {
    let file = std::fs::File::open(path)?;
    read_episode(std::io::BufReader::new(file))
}
