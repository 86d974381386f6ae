//! Task progress: insertion depth, alignment, phase segmentation and success.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::{SceneConfig, World};
use crate::se3::Pose;

/// Insertion depth needed for success (m).
pub const SUCCESS_DEPTH: f64 = 0.100;
/// Peg axis tilt allowed at success (deg).
pub const SUCCESS_TILT_DEG: f64 = 5.0;
/// Depth at which the align phase turns into insert (m).
pub const INSERT_DEPTH: f64 = 0.010;
/// Distance from the mouth separating transport from align (m).
pub const ALIGN_RADIUS: f64 = 0.150;
/// Wall penetration tolerated before an in-hole offset is called impossible (m).
pub const PENETRATION_ALLOWANCE: f64 = 0.0005;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Reach,
    Transport,
    Align,
    Insert,
    Done,
}

impl Phase {
    pub const ALL: [Phase; 5] = [Phase::Reach, Phase::Transport, Phase::Align, Phase::Insert, Phase::Done];

    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::Reach => "reach",
            Phase::Transport => "transport",
            Phase::Align => "align",
            Phase::Insert => "insert",
            Phase::Done => "done",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PegHoleGeometry {
    /// How far the lower peg end sits below the mouth, zero unless it is
    /// within the hole footprint (m).
    pub depth: f64,
    /// Largest per-axis lateral offset of the peg center from the hole axis (m).
    pub lateral_offset: f64,
    /// Angle between peg and hole axes, sign-agnostic (rad).
    pub tilt: f64,
    /// Distance from the lower peg end to the mouth center (m).
    pub distance_to_mouth: f64,
}

pub fn peg_hole_geometry(peg: &Pose, scene: &SceneConfig) -> PegHoleGeometry {
    let hole = &scene.hole_pose;
    let half_len = scene.peg_dims[2] / 2.0;
    let end_a = hole.inverse_transform_point(&peg.transform_point(&Vector3::new(0.0, 0.0, -half_len)));
    let end_b = hole.inverse_transform_point(&peg.transform_point(&Vector3::new(0.0, 0.0, half_len)));
    let lower = if end_a.z <= end_b.z { end_a } else { end_b };
    let inside_footprint = lower.x.abs() <= scene.hole_inner[0] / 2.0 && lower.y.abs() <= scene.hole_inner[1] / 2.0;
    let depth = if inside_footprint { (-lower.z).max(0.0) } else { 0.0 };
    let center = hole.inverse_transform_point(&peg.position);
    let peg_axis = peg.orientation * Vector3::z();
    let hole_axis = hole.orientation * Vector3::z();
    PegHoleGeometry {
        depth,
        lateral_offset: center.x.abs().max(center.y.abs()),
        tilt: peg_axis.dot(&hole_axis).abs().min(1.0).acos(),
        distance_to_mouth: lower.norm(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeStatus {
    pub phase: Phase,
    pub success: bool,
    pub t: f64,
    pub geometry: PegHoleGeometry,
    /// False when the peg is deep in the hole yet further off-axis than the
    /// clearance allows, which rigid contact cannot produce.
    pub consistent: bool,
}

pub fn half_clearance(scene: &SceneConfig) -> f64 {
    ((scene.hole_inner[0] - scene.peg_dims[0]) / 2.0).min((scene.hole_inner[1] - scene.peg_dims[1]) / 2.0)
}

/// Pure status evaluation for a peg pose and grasp flag.
pub fn evaluate(peg: &Pose, grasped: bool, t: f64, scene: &SceneConfig) -> EpisodeStatus {
    let geometry = peg_hole_geometry(peg, scene);
    let clearance = half_clearance(scene);
    let success = geometry.tilt <= SUCCESS_TILT_DEG.to_radians()
        && geometry.lateral_offset <= clearance
        && geometry.depth >= SUCCESS_DEPTH;
    let consistent = !(geometry.depth >= SUCCESS_DEPTH && geometry.lateral_offset > clearance + PENETRATION_ALLOWANCE);
    let phase = if success {
        Phase::Done
    } else if !grasped {
        Phase::Reach
    } else if geometry.depth >= INSERT_DEPTH {
        Phase::Insert
    } else if geometry.distance_to_mouth > ALIGN_RADIUS {
        Phase::Transport
    } else {
        Phase::Align
    };
    EpisodeStatus {
        phase,
        success,
        t,
        geometry,
        consistent,
    }
}

pub fn check_success(world: &World) -> EpisodeStatus {
    evaluate(&world.peg().pose, world.grasped(), world.t(), world.scene())
}
