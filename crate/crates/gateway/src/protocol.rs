//! Operator wire protocol: one JSON object per WebSocket text frame or per
//! line, tagged by `"type"`.

use serde::{Deserialize, Serialize};
use teleimp_core::se3::Pose;
use teleimp_core::sim::Phase;
use teleimp_core::teleop::{GripperState, SCALE_MAX, SCALE_MIN};
use thiserror::Error;

/// Quaternions further than this from unit norm are renormalized on decode.
const UNIT_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClientMessage {
    /// Interface pose in the world frame, `q` as `[w, x, y, z]`.
    PoseSample {
        t: f64,
        p: [f64; 3],
        q: [f64; 4],
    },
    /// Normalized pressures, translational and rotational.
    Fsr {
        t: f64,
        pt: f64,
        pr: f64,
    },
    GripperToggle,
    TeleopToggle,
    ScaleSet {
        s: f64,
    },
}

impl ClientMessage {
    pub fn kind(&self) -> &'static str {
        match self {
            ClientMessage::PoseSample { .. } => "pose_sample",
            ClientMessage::Fsr { .. } => "fsr",
            ClientMessage::GripperToggle => "gripper_toggle",
            ClientMessage::TeleopToggle => "teleop_toggle",
            ClientMessage::ScaleSet { .. } => "scale_set",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Telemetry {
    pub t: f64,
    pub ee_pose: Pose,
    pub goal_pose: Pose,
    pub kt: f64,
    pub kr: f64,
    pub ext_force_norm: f64,
    pub phase: Phase,
    pub success: bool,
    pub stale: bool,
    pub peg_pose: Pose,
    pub hole_pose: Pose,
    pub gripper: GripperState,
    pub engaged: bool,
    pub scale: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    /// The frame was not a valid client message.
    Parse,
    /// Another operator is connected.
    Busy,
    /// The message was valid but could not be applied.
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ServerMessage {
    Telemetry(Telemetry),
    Haptic { amplitude: f64 },
    Bars { kt_frac: f64, kr_frac: f64 },
    Error { code: ErrorCode, detail: String },
}

impl ServerMessage {
    pub fn error(code: ErrorCode, detail: impl Into<String>) -> Self {
        ServerMessage::Error {
            code,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{detail}")]
pub struct DecodeError {
    pub detail: String,
    /// Name of the missing or offending field, when there is one.
    pub field: Option<String>,
}

/// A decoded message plus notes about values that had to be coerced.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded<M> {
    pub msg: M,
    pub warnings: Vec<String>,
}

impl<M> Decoded<M> {
    pub fn clamped(&self) -> bool {
        !self.warnings.is_empty()
    }
}

pub fn encode<M: Serialize>(msg: &M) -> String {
    serde_json::to_string(msg).expect("protocol messages always serialize")
}

fn decode_error(e: serde_json::Error) -> DecodeError {
    let text = e.to_string();
    let field = ["missing field `", "unknown field `"]
        .iter()
        .find_map(|marker| text.split_once(marker))
        .and_then(|(_, rest)| rest.split_once('`'))
        .map(|(name, _)| name.to_string());
    DecodeError {
        detail: text,
        field,
    }
}

fn clamp_into(name: &str, value: &mut f64, lo: f64, hi: f64, warnings: &mut Vec<String>) {
    let clamped = value.clamp(lo, hi);
    if clamped != *value {
        warnings.push(format!("{name} = {value} clamped to {clamped}"));
        *value = clamped;
    }
}

pub fn decode_client(frame: &str) -> Result<Decoded<ClientMessage>, DecodeError> {
    let mut msg: ClientMessage = serde_json::from_str(frame).map_err(decode_error)?;
    let mut warnings = Vec::new();
    match &mut msg {
        ClientMessage::Fsr { pt, pr, .. } => {
            clamp_into("pt", pt, 0.0, 1.0, &mut warnings);
            clamp_into("pr", pr, 0.0, 1.0, &mut warnings);
        }
        ClientMessage::ScaleSet { s } => clamp_into("s", s, SCALE_MIN, SCALE_MAX, &mut warnings),
        ClientMessage::PoseSample { q, .. } => {
            let n = q.iter().map(|c| c * c).sum::<f64>().sqrt();
            if !(n > 0.0 && n.is_finite()) {
                return Err(DecodeError {
                    detail: "q must have a finite, non-zero norm".into(),
                    field: Some("q".into()),
                });
            }
            if (n - 1.0).abs() > UNIT_TOLERANCE {
                warnings.push(format!("q with norm {n} renormalized"));
                *q = q.map(|c| c / n);
            }
        }
        ClientMessage::GripperToggle | ClientMessage::TeleopToggle => {}
    }
    Ok(Decoded { msg, warnings })
}

pub fn decode_server(frame: &str) -> Result<ServerMessage, DecodeError> {
    serde_json::from_str(frame).map_err(decode_error)
}
