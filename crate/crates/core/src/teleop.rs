//! Leader-follower mapping with clutching, motion scaling, gripper toggling
//! and the vibrotactile amplitude.
//!
//! On engagement the current leader pose and the currently held follower goal
//! become anchors; afterwards the goal is the follower anchor displaced by the
//! scaled leader translation and rotated by the (unscaled) leader rotation.
//! Re-anchoring on every engage makes the transfer bumpless.

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::se3::{Pose, Wrench};
use crate::tracker::TrackedPose;

pub const SCALE_MIN: f64 = 0.1;
pub const SCALE_MAX: f64 = 2.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TeleopError {
    #[error("tracked interface pose is stale; refusing to engage")]
    StalePose,
    #[error("no interface pose has been tracked yet; refusing to engage")]
    NoPose,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClutchState {
    pub engaged: bool,
    pub leader_anchor: Pose,
    pub follower_anchor: Pose,
}

impl Default for ClutchState {
    fn default() -> Self {
        Self {
            engaged: false,
            leader_anchor: Pose::identity(),
            follower_anchor: Pose::identity(),
        }
    }
}

/// Leader-to-follower motion scale, clamped to `[0.1, 2.0]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct ScaleFactor(f64);

impl ScaleFactor {
    pub fn new(s: f64) -> Self {
        if s.is_nan() {
            return Self(1.0);
        }
        Self(s.clamp(SCALE_MIN, SCALE_MAX))
    }

    pub fn get(&self) -> f64 {
        self.0
    }
}

impl Default for ScaleFactor {
    fn default() -> Self {
        Self(1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct HapticCue {
    amplitude: f64,
}

impl HapticCue {
    pub fn new(amplitude: f64) -> Self {
        Self {
            amplitude: if amplitude.is_nan() { 0.0 } else { amplitude.clamp(0.0, 1.0) },
        }
    }

    pub fn amplitude(&self) -> f64 {
        self.amplitude
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GripperState {
    #[default]
    Open,
    Closed,
}

pub fn gripper_toggle(current: GripperState) -> GripperState {
    match current {
        GripperState::Open => GripperState::Closed,
        GripperState::Closed => GripperState::Open,
    }
}

/// Force magnitude relative to saturation, capped at 1. Torque is ignored.
pub fn vibro_amplitude(external: &Wrench, f_sat: f64) -> HapticCue {
    debug_assert!(f_sat > 0.0);
    HapticCue::new((external.force.norm() / f_sat).min(1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeleopConfig {
    /// Leader-to-follower frame alignment as `[w, x, y, z]`.
    pub r_offset: [f64; 4],
    /// Force (N) at which the vibrotactile cue saturates.
    pub f_sat: f64,
    pub initial_scale: f64,
}

impl Default for TeleopConfig {
    fn default() -> Self {
        Self {
            r_offset: [1.0, 0.0, 0.0, 0.0],
            f_sat: 30.0,
            initial_scale: 1.0,
        }
    }
}

impl TeleopConfig {
    pub fn r_offset(&self) -> UnitQuaternion<f64> {
        let q = Quaternion::new(self.r_offset[0], self.r_offset[1], self.r_offset[2], self.r_offset[3]);
        let n = q.norm();
        if n > 0.0 && n.is_finite() {
            UnitQuaternion::new_unchecked(q / n)
        } else {
            UnitQuaternion::identity()
        }
    }
}

pub fn engage(leader_now: &TrackedPose, follower_now: &Pose) -> Result<ClutchState, TeleopError> {
    if leader_now.stale {
        return Err(TeleopError::StalePose);
    }
    Ok(ClutchState {
        engaged: true,
        leader_anchor: leader_now.pose_world,
        follower_anchor: *follower_now,
    })
}

/// Goal for the follower, or `None` while disengaged.
pub fn map_leader_to_goal(
    leader_now: &Pose,
    state: &ClutchState,
    scale: ScaleFactor,
    r_offset: &UnitQuaternion<f64>,
) -> Option<Pose> {
    if !state.engaged {
        return None;
    }
    let displacement = leader_now.position - state.leader_anchor.position;
    let position = state.follower_anchor.position + (r_offset * displacement) * scale.get();

    // Leader rotation since the anchor, expressed in the follower frame.
    let delta = product(leader_now.orientation.quaternion(), &state.leader_anchor.orientation.quaternion().conjugate());
    let delta = product(&product(r_offset.quaternion(), &delta), &r_offset.quaternion().conjugate());
    let orientation = product(&normalize(delta), state.follower_anchor.orientation.quaternion());
    Some(Pose {
        position,
        orientation: UnitQuaternion::new_unchecked(normalize(orientation)),
    })
}

fn product(a: &Quaternion<f64>, b: &Quaternion<f64>) -> Quaternion<f64> {
    a * b
}

fn normalize(q: Quaternion<f64>) -> Quaternion<f64> {
    let n = q.norm();
    if n == 1.0 {
        q
    } else {
        q / n
    }
}

/// Mutable teleoperation state owned by the simulation loop.
#[derive(Debug, Clone)]
pub struct TeleopPipeline {
    cfg: TeleopConfig,
    r_offset: UnitQuaternion<f64>,
    clutch: ClutchState,
    scale: ScaleFactor,
    gripper: GripperState,
    goal: Pose,
    last_leader: Option<Pose>,
}

impl TeleopPipeline {
    pub fn new(cfg: TeleopConfig, initial_goal: Pose) -> Self {
        Self {
            r_offset: cfg.r_offset(),
            scale: ScaleFactor::new(cfg.initial_scale),
            cfg,
            clutch: ClutchState::default(),
            gripper: GripperState::Open,
            goal: initial_goal,
            last_leader: None,
        }
    }

    pub fn config(&self) -> &TeleopConfig {
        &self.cfg
    }

    pub fn clutch(&self) -> &ClutchState {
        &self.clutch
    }

    pub fn engaged(&self) -> bool {
        self.clutch.engaged
    }

    pub fn scale(&self) -> ScaleFactor {
        self.scale
    }

    pub fn gripper(&self) -> GripperState {
        self.gripper
    }

    /// Currently commanded follower goal (held while disengaged).
    pub fn goal(&self) -> Pose {
        self.goal
    }

    pub fn engage(&mut self, leader_now: Option<&TrackedPose>) -> Result<(), TeleopError> {
        let leader = leader_now.ok_or(TeleopError::NoPose)?;
        self.clutch = engage(leader, &self.goal)?;
        self.last_leader = Some(leader.pose_world);
        Ok(())
    }

    pub fn disengage(&mut self) {
        self.clutch.engaged = false;
    }

    /// Flips the clutch; returns the new engaged flag.
    pub fn toggle_teleop(&mut self, leader_now: Option<&TrackedPose>) -> Result<bool, TeleopError> {
        if self.clutch.engaged {
            self.disengage();
        } else {
            self.engage(leader_now)?;
        }
        Ok(self.clutch.engaged)
    }

    /// Changes the motion scale. While engaged the anchors are re-indexed at
    /// the current leader pose and goal so the change does not move the goal.
    pub fn set_scale(&mut self, s: f64) -> ScaleFactor {
        self.scale = ScaleFactor::new(s);
        if self.clutch.engaged {
            if let Some(leader) = self.last_leader {
                self.clutch.leader_anchor = leader;
                self.clutch.follower_anchor = self.goal;
            }
        }
        self.scale
    }

    pub fn toggle_gripper(&mut self) -> GripperState {
        self.gripper = gripper_toggle(self.gripper);
        self.gripper
    }

    /// Feeds a new leader pose; returns the resulting goal.
    pub fn update(&mut self, leader_now: &Pose) -> Pose {
        if let Some(goal) = map_leader_to_goal(leader_now, &self.clutch, self.scale, &self.r_offset) {
            self.goal = goal;
            self.last_leader = Some(*leader_now);
        }
        self.goal
    }

    pub fn haptic(&self, external: &Wrench) -> HapticCue {
        vibro_amplitude(external, self.cfg.f_sat)
    }
}

/// `pose` translated by `delta`, orientation unchanged.
pub fn displaced(pose: &Pose, delta: Vector3<f64>) -> Pose {
    Pose {
        position: pose.position + delta,
        orientation: pose.orientation,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::se3::{axis_angle, geodesic_angle};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn tracked(pose: Pose, stale: bool) -> TrackedPose {
        TrackedPose {
            pose_world: pose,
            weight_sum: 1.0,
            n_used: 1,
            stale,
            timestamp: 0.0,
        }
    }

    fn leader0() -> Pose {
        Pose::new(Vector3::new(0.1, -0.2, 0.3), axis_angle(Vector3::new(0.3, 0.1, 1.0), 0.4))
    }

    fn follower0() -> Pose {
        Pose::new(Vector3::new(0.5, 0.0, 0.4), axis_angle(Vector3::new(1.0, 0.0, 0.0), 3.0))
    }

    #[test]
    fn engage_is_bumpless() {
        let mut t = TeleopPipeline::new(TeleopConfig::default(), follower0());
        t.engage(Some(&tracked(leader0(), false))).unwrap();
        assert_eq!(t.update(&leader0()), follower0());
    }

    #[test]
    fn engage_refuses_stale_or_missing_pose() {
        let mut t = TeleopPipeline::new(TeleopConfig::default(), follower0());
        assert_eq!(t.engage(Some(&tracked(leader0(), true))), Err(TeleopError::StalePose));
        assert_eq!(t.engage(None), Err(TeleopError::NoPose));
        assert!(!t.engaged());
    }

    #[test]
    fn translation_follows_scaled_leader() {
        let mut t = TeleopPipeline::new(TeleopConfig::default(), follower0());
        t.engage(Some(&tracked(leader0(), false))).unwrap();
        let goal = t.update(&displaced(&leader0(), Vector3::new(0.2, 0.0, 0.0)));
        assert_relative_eq!(goal.position - follower0().position, Vector3::new(0.2, 0.0, 0.0), epsilon = 1e-15);

        t.set_scale(0.5);
        let before = t.goal();
        let goal = t.update(&displaced(&leader0(), Vector3::new(0.4, 0.0, 0.0)));
        assert_relative_eq!(goal.position - before.position, Vector3::new(0.1, 0.0, 0.0), epsilon = 1e-15);
    }

    #[test]
    fn rotation_is_unscaled() {
        let cfg = TeleopConfig {
            initial_scale: 0.3,
            ..TeleopConfig::default()
        };
        let mut t = TeleopPipeline::new(cfg, follower0());
        let leader = Pose::from_translation(0.0, 0.0, 0.3);
        t.engage(Some(&tracked(leader, false))).unwrap();
        let rot = axis_angle(Vector3::z(), 30f64.to_radians());
        let goal = t.update(&Pose::new(leader.position, rot * leader.orientation));
        let expected = rot * follower0().orientation;
        assert!(geodesic_angle(&goal.orientation, &expected) < 1e-12);
        assert_relative_eq!(goal.position, follower0().position, epsilon = 1e-15);
    }

    #[test]
    fn r_offset_rotates_displacements() {
        let cfg = TeleopConfig {
            r_offset: {
                let q = axis_angle(Vector3::z(), std::f64::consts::FRAC_PI_2);
                [q.w, q.i, q.j, q.k]
            },
            ..TeleopConfig::default()
        };
        let mut t = TeleopPipeline::new(cfg, Pose::identity());
        t.engage(Some(&tracked(Pose::identity(), false))).unwrap();
        let goal = t.update(&Pose::from_translation(0.1, 0.0, 0.0));
        assert_relative_eq!(goal.position, Vector3::new(0.0, 0.1, 0.0), epsilon = 1e-15);
    }

    #[test]
    fn disengaged_holds_goal() {
        let mut t = TeleopPipeline::new(TeleopConfig::default(), follower0());
        assert_eq!(map_leader_to_goal(&leader0(), t.clutch(), t.scale(), &UnitQuaternion::identity()), None);
        assert_eq!(t.update(&displaced(&leader0(), Vector3::new(1.0, 1.0, 1.0))), follower0());
    }

    #[test]
    fn gripper_toggles() {
        assert_eq!(gripper_toggle(GripperState::Open), GripperState::Closed);
        assert_eq!(gripper_toggle(GripperState::Closed), GripperState::Open);
        assert_eq!(gripper_toggle(gripper_toggle(GripperState::Open)), GripperState::Open);
    }

    #[test]
    fn vibro_examples() {
        let f = |x: f64| Wrench {
            force: Vector3::new(0.0, x, 0.0),
            torque: Vector3::new(5.0, 0.0, 0.0),
        };
        assert_eq!(vibro_amplitude(&Wrench::zero(), 30.0).amplitude(), 0.0);
        assert_eq!(vibro_amplitude(&f(30.0), 30.0).amplitude(), 1.0);
        assert_eq!(vibro_amplitude(&f(15.0), 30.0).amplitude(), 0.5);
        assert_eq!(vibro_amplitude(&f(300.0), 30.0).amplitude(), 1.0);
    }

    #[test]
    fn scale_is_clamped() {
        assert_eq!(ScaleFactor::new(5.0).get(), 2.0);
        assert_eq!(ScaleFactor::new(0.0).get(), 0.1);
        assert_eq!(ScaleFactor::new(0.7).get(), 0.7);
    }

    fn arb_pose() -> impl Strategy<Value = Pose> {
        (prop::array::uniform3(-0.5f64..0.5), prop::array::uniform3(-1.0f64..1.0), 0.0f64..3.0)
            .prop_map(|(p, a, angle)| Pose::new(Vector3::from(p), axis_angle(Vector3::from(a), angle)))
    }

    proptest! {
        #[test]
        fn clutch_cycles_never_jump(
            start in arb_pose(),
            moves in prop::collection::vec((arb_pose(), arb_pose(), 0.1f64..2.0), 1..20),
        ) {
            let mut t = TeleopPipeline::new(TeleopConfig::default(), start);
            let mut leader = start;
            t.engage(Some(&tracked(leader, false))).unwrap();
            for (engaged_pose, wander, s) in moves {
                t.update(&engaged_pose);
                t.set_scale(s);
                t.disengage();
                let before = t.goal();
                leader = wander;
                t.update(&leader);
                t.engage(Some(&tracked(leader, false))).unwrap();
                let after = t.update(&leader);
                let (dp, dq) = before.distance_to(&after);
                prop_assert!(dp <= 1e-9 && dq <= 1e-9);
            }
        }

        #[test]
        fn displacement_scales_linearly(d in prop::array::uniform3(-0.3f64..0.3), s in 0.1f64..2.0) {
            let cfg = TeleopConfig { initial_scale: s, ..TeleopConfig::default() };
            let mut t = TeleopPipeline::new(cfg, follower0());
            t.engage(Some(&tracked(leader0(), false))).unwrap();
            let goal = t.update(&displaced(&leader0(), Vector3::from(d)));
            let moved = goal.position - follower0().position;
            prop_assert!((moved - Vector3::from(d) * s).norm() < 1e-12);
        }

        #[test]
        fn vibro_is_monotone_and_torque_blind(a in 0.0f64..100.0, b in 0.0f64..100.0, tau in prop::array::uniform3(-10.0f64..10.0)) {
            let w = |f: f64, tq: [f64; 3]| Wrench { force: Vector3::new(f, 0.0, 0.0), torque: Vector3::from(tq) };
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(vibro_amplitude(&w(lo, tau), 30.0).amplitude() <= vibro_amplitude(&w(hi, [0.0; 3]), 30.0).amplitude());
            prop_assert_eq!(vibro_amplitude(&w(a, tau), 30.0), vibro_amplitude(&w(a, [0.0; 3]), 30.0));
        }
    }
}
