//! Fixed-step simulation of an impedance-controlled free-flying end-effector,
//! a gripper, a peg and a hole fixture.
//!
//! The end-effector is a 6-DoF rigid body (isotropic rotational inertia)
//! driven only by the Cartesian impedance wrench; its own weight is assumed
//! compensated. A grasped peg rides rigidly on the end-effector and loads it
//! with its uncompensated weight and its contact forces, which is also what
//! the external wrench estimate reports. A free peg falls under gravity and
//! rests on the table through penalty contacts.
//!
//! Integration is semi-implicit Euler: velocities first, then poses from the
//! updated velocities.

pub mod contact;
pub mod status;

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::impedance::ImpedanceCommand;
use crate::se3::{compose, exp_rotation, invert, orientation_error, Pose, Twist, Wrench};
use crate::teleop::GripperState;

pub use contact::{contact_wrench, ContactPoint, ContactResult};
pub use status::{check_success, EpisodeStatus, Phase};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("simulation diverged: {quantity} is not finite at t = {t}")]
    Diverged { quantity: &'static str, t: f64 },
    #[error("invalid scene: {0}")]
    InvalidScene(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    /// Peg width, depth, length (m).
    pub peg_dims: [f64; 3],
    /// Hole cavity width, depth, length (m).
    pub hole_inner: [f64; 3],
    /// Fixture wall thickness (m).
    pub hole_wall: f64,
    /// Fixture base thickness under the cavity (m).
    pub hole_base: f64,
    pub peg_mass: f64,
    /// Frame at the center of the hole mouth, +z pointing out of the hole.
    pub hole_pose: Pose,
    pub peg_start_pose: Pose,
    /// N/m
    pub contact_stiffness: f64,
    /// N*s/m
    pub contact_damping: f64,
    pub friction_mu: f64,
    /// Slip speed below which friction is viscous (m/s).
    pub friction_slip_eps: f64,
    /// m/s^2, acting along world -z.
    pub gravity: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        let hole_base = 0.020;
        let hole_inner = [0.056, 0.056, 0.150];
        Self {
            peg_dims: [0.050, 0.050, 0.150],
            hole_inner,
            hole_wall: 0.020,
            hole_base,
            peg_mass: 0.5,
            hole_pose: Pose::from_translation(0.30, 0.0, hole_base + hole_inner[2]),
            peg_start_pose: Pose::from_translation(0.0, 0.0, 0.075),
            contact_stiffness: 10_000.0,
            contact_damping: 50.0,
            friction_mu: 0.4,
            friction_slip_eps: 0.01,
            gravity: 9.81,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidScene(m.to_string()));
        if self.peg_dims.iter().chain(&self.hole_inner).any(|d| !(*d > 0.0)) {
            return bad("dimensions must be positive");
        }
        if !(self.hole_inner[0] > self.peg_dims[0] && self.hole_inner[1] > self.peg_dims[1]) {
            return bad("hole cross-section must exceed the peg cross-section");
        }
        if !(self.peg_mass > 0.0) || !(self.hole_wall > 0.0) || !(self.hole_base > 0.0) {
            return bad("peg mass and fixture thicknesses must be positive");
        }
        if !(self.contact_stiffness > 0.0 && self.contact_damping >= 0.0 && self.friction_mu >= 0.0) {
            return bad("contact constants out of range");
        }
        if !(self.friction_slip_eps > 0.0) || !(self.gravity >= 0.0) {
            return bad("friction_slip_eps must be positive and gravity non-negative");
        }
        Ok(())
    }

    /// Isotropic approximation of the peg's rotational inertia about its center.
    pub fn peg_inertia(&self) -> f64 {
        let [a, b, c] = self.peg_dims;
        self.peg_mass * (a * a + b * b + c * c) / 18.0
    }

    /// Grasp point on the peg: center of its top face (peg frame).
    pub fn grasp_point_local(&self) -> Vector3<f64> {
        Vector3::new(0.0, 0.0, self.peg_dims[2] / 2.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    /// Integrator step (s).
    pub dt: f64,
    pub ee_mass: f64,
    /// kg*m^2
    pub ee_inertia: f64,
    pub ee_start: Pose,
    /// Largest end-effector to grasp-point distance at which closing grasps (m).
    pub grasp_tolerance: f64,
    /// Standard deviation of the noise added to the external force estimate (N).
    pub wrench_noise_sigma: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt: 0.001,
            ee_mass: 2.0,
            ee_inertia: 0.02,
            ee_start: Pose::from_translation(0.0, 0.0, 0.35),
            grasp_tolerance: 0.015,
            wrench_noise_sigma: 0.0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.dt > 0.0 && self.ee_mass > 0.0 && self.ee_inertia > 0.0) {
            return Err(SimError::InvalidScene("dt, ee_mass and ee_inertia must be positive".into()));
        }
        if !(self.grasp_tolerance >= 0.0 && self.wrench_noise_sigma >= 0.0) {
            return Err(SimError::InvalidScene("grasp tolerance and noise must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BodyState {
    pub pose: Pose,
    pub twist: Twist,
    pub mass: f64,
    pub rot_inertia: f64,
}

/// What the controller is asked to do during one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Commands {
    pub goal: Pose,
    pub impedance: ImpedanceCommand,
    pub gripper: GripperState,
}

/// Serializable dynamic state, enough to restart a simulation mid-run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub t: f64,
    pub steps: u64,
    pub ee_pose: Pose,
    pub ee_twist: Twist,
    pub peg_pose: Pose,
    pub peg_twist: Twist,
    pub gripper: GripperState,
    /// Peg pose in the end-effector frame while grasped.
    pub grasp: Option<Pose>,
}

/// Spring-damper wrench pulling the end-effector toward `goal` and to rest.
pub fn impedance_wrench(goal: &Pose, ee: &BodyState, impedance: &ImpedanceCommand) -> Wrench {
    let k = &impedance.k_diag;
    let d = &impedance.d_diag;
    let dx = goal.position - ee.pose.position;
    let dr = orientation_error(&goal.orientation, &ee.pose.orientation);
    let v = ee.twist.linear;
    let w = ee.twist.angular;
    Wrench {
        force: Vector3::new(k[0] * dx.x - d[0] * v.x, k[1] * dx.y - d[1] * v.y, k[2] * dx.z - d[2] * v.z),
        torque: Vector3::new(k[3] * dr.x - d[3] * w.x, k[4] * dr.y - d[4] * w.y, k[5] * dr.z - d[5] * w.z),
    }
}

#[derive(Debug, Clone)]
pub struct World {
    cfg: SimConfig,
    scene: SceneConfig,
    t0: f64,
    steps: u64,
    ee: BodyState,
    peg: BodyState,
    gripper: GripperState,
    grasp: Option<Pose>,
    noise_rng: ChaCha8Rng,
}

impl World {
    pub fn new(cfg: SimConfig, scene: SceneConfig, seed: u64) -> Result<Self, SimError> {
        let state = WorldState {
            t: 0.0,
            steps: 0,
            ee_pose: cfg.ee_start.normalized(),
            ee_twist: Twist::zero(),
            peg_pose: scene.peg_start_pose.normalized(),
            peg_twist: Twist::zero(),
            gripper: GripperState::Open,
            grasp: None,
        };
        Self::from_state(cfg, scene, &state, seed)
    }

    pub fn from_state(cfg: SimConfig, scene: SceneConfig, state: &WorldState, seed: u64) -> Result<Self, SimError> {
        cfg.validate()?;
        scene.validate()?;
        let mut noise_rng = ChaCha8Rng::seed_from_u64(seed);
        noise_rng.set_stream(1);
        let mut world = Self {
            ee: BodyState {
                pose: state.ee_pose,
                twist: state.ee_twist,
                mass: cfg.ee_mass,
                rot_inertia: cfg.ee_inertia,
            },
            peg: BodyState {
                pose: state.peg_pose,
                twist: state.peg_twist,
                mass: scene.peg_mass,
                rot_inertia: scene.peg_inertia(),
            },
            cfg,
            scene,
            t0: state.t - state.steps as f64 * cfg.dt,
            steps: state.steps,
            gripper: state.gripper,
            grasp: state.grasp,
            noise_rng,
        };
        world.sync_grasped();
        Ok(world)
    }

    pub fn state(&self) -> WorldState {
        WorldState {
            t: self.t(),
            steps: self.steps,
            ee_pose: self.ee.pose,
            ee_twist: self.ee.twist,
            peg_pose: self.peg.pose,
            peg_twist: self.peg.twist,
            gripper: self.gripper,
            grasp: self.grasp,
        }
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn scene(&self) -> &SceneConfig {
        &self.scene
    }

    pub fn t(&self) -> f64 {
        self.t0 + self.steps as f64 * self.cfg.dt
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn ee(&self) -> &BodyState {
        &self.ee
    }

    pub fn peg(&self) -> &BodyState {
        &self.peg
    }

    pub fn gripper(&self) -> GripperState {
        self.gripper
    }

    pub fn grasped(&self) -> bool {
        self.grasp.is_some()
    }

    /// Distance from the end-effector to the peg's grasp point.
    pub fn grasp_distance(&self) -> f64 {
        let grasp_point = self.peg.pose.transform_point(&self.scene.grasp_point_local());
        (grasp_point - self.ee.pose.position).norm()
    }

    fn apply_gripper(&mut self, wanted: GripperState) {
        if wanted == self.gripper {
            return;
        }
        self.gripper = wanted;
        match wanted {
            GripperState::Closed => {
                if self.grasp_distance() <= self.cfg.grasp_tolerance {
                    self.grasp = Some(compose(&invert(&self.ee.pose), &self.peg.pose));
                }
            }
            GripperState::Open => {
                // The released peg keeps the velocity it had as part of the end-effector.
                self.sync_grasped();
                self.grasp = None;
            }
        }
    }

    fn sync_grasped(&mut self) {
        if let Some(rel) = self.grasp {
            self.peg.pose = compose(&self.ee.pose, &rel);
            let r = self.peg.pose.position - self.ee.pose.position;
            self.peg.twist = Twist {
                linear: self.ee.twist.linear + self.ee.twist.angular.cross(&r),
                angular: self.ee.twist.angular,
            };
        }
    }

    /// Payload weight plus contact forces on the grasped peg, as a wrench
    /// about the end-effector origin. Zero when nothing is grasped.
    fn payload_load(&self) -> Wrench {
        if self.grasp.is_none() {
            return Wrench::zero();
        }
        let contact = contact_wrench(&self.peg.pose, &self.peg.twist, &self.scene);
        let r = self.peg.pose.position - self.ee.pose.position;
        let weight = Vector3::new(0.0, 0.0, -self.scene.gravity * self.peg.mass);
        let force = contact.wrench.force + weight;
        Wrench {
            force,
            torque: contact.wrench.torque + r.cross(&force),
        }
    }

    /// Contact state of the peg at the current instant.
    pub fn contacts(&self) -> ContactResult {
        contact_wrench(&self.peg.pose, &self.peg.twist, &self.scene)
    }

    /// Advances one fixed step under `cmd`.
    pub fn step(&mut self, cmd: &Commands) -> Result<(), SimError> {
        self.apply_gripper(cmd.gripper);
        let dt = self.cfg.dt;
        let imp = impedance_wrench(&cmd.goal, &self.ee, &cmd.impedance);
        if self.grasp.is_some() {
            let load = self.payload_load();
            let r = self.peg.pose.position - self.ee.pose.position;
            let mass = self.ee.mass + self.peg.mass;
            let inertia = self.ee.rot_inertia + self.peg.rot_inertia + self.peg.mass * r.norm_squared();
            integrate(&mut self.ee, &(imp + load), mass, inertia, dt);
            self.sync_grasped();
        } else {
            let (m, i) = (self.ee.mass, self.ee.rot_inertia);
            integrate(&mut self.ee, &imp, m, i, dt);
            let contact = contact_wrench(&self.peg.pose, &self.peg.twist, &self.scene);
            let load = Wrench {
                force: contact.wrench.force + Vector3::new(0.0, 0.0, -self.scene.gravity * self.peg.mass),
                torque: contact.wrench.torque,
            };
            let (m, i) = (self.peg.mass, self.peg.rot_inertia);
            integrate(&mut self.peg, &load, m, i, dt);
        }
        self.steps += 1;
        self.check_finite()
    }

    fn check_finite(&self) -> Result<(), SimError> {
        let t = self.t();
        let checks: [(&'static str, bool); 4] = [
            ("end-effector pose", self.ee.pose.is_finite()),
            ("end-effector twist", self.ee.twist.is_finite()),
            ("peg pose", self.peg.pose.is_finite()),
            ("peg twist", self.peg.twist.is_finite()),
        ];
        match checks.iter().find(|(_, ok)| !ok) {
            Some((quantity, _)) => Err(SimError::Diverged { quantity, t }),
            None => Ok(()),
        }
    }

    /// External wrench at the end-effector as a force/torque sensor would see
    /// it: grasped payload weight and contact load, plus optional noise.
    pub fn estimate_external_wrench(&mut self) -> Wrench {
        let mut w = self.payload_load();
        let sigma = self.cfg.wrench_noise_sigma;
        if sigma > 0.0 {
            let mut n = || -> f64 { StandardNormal.sample(&mut self.noise_rng) };
            w.force += Vector3::new(n(), n(), n()) * sigma;
        }
        w
    }

    pub fn status(&self) -> EpisodeStatus {
        check_success(self)
    }
}

fn integrate(body: &mut BodyState, load: &Wrench, mass: f64, inertia: f64, dt: f64) {
    body.twist.linear += load.force * (dt / mass);
    body.twist.angular += load.torque * (dt / inertia);
    body.pose.position += body.twist.linear * dt;
    if body.twist.angular != Vector3::zeros() {
        body.pose = Pose::new(body.pose.position, exp_rotation(&(body.twist.angular * dt)) * body.pose.orientation);
    }
}
