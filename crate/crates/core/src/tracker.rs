//! Interface pose tracking from a polyhedron of planar fiducial markers.
//!
//! Every detected face yields one estimate of the interface pose by chaining
//! camera-in-world, marker-in-camera and the constant face-to-interface
//! transform. Faces seen at grazing angles are unreliable (planar pose
//! ambiguity), so each estimate is weighted by the cosine between the line of
//! sight and the face normal and dropped when that cosine is at or below a
//! threshold. The survivors are fused with [`weighted_pose_mean`].
//!
//! There is no camera here: [`synth_observe`] produces the per-face camera
//! poses a detector would report, including Gaussian noise and the two-fold
//! flip ambiguity.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::se3::{axis_angle, compose, exp_rotation, invert, weighted_pose_mean, Pose};

/// Edge length of the default marker cube (m).
pub const CUBE_EDGE: f64 = 0.060;
/// Distance from the interface grasp frame to the cube center along interface z (m).
pub const STEM_OFFSET: f64 = 0.110;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrackerError {
    #[error("marker {0} is not part of the polyhedron")]
    UnknownMarker(u32),
    #[error("observation of marker {0} has a zero-length camera-frame position")]
    DegenerateObservation(u32),
    #[error("no interface pose has been acquired yet")]
    NoPoseYet,
    #[error("invalid tracker configuration: {0}")]
    InvalidConfig(String),
    #[error("observation log line {line}: {detail}")]
    Log { line: usize, detail: String },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarkerObservation {
    pub marker_id: u32,
    /// Marker frame expressed in the camera frame.
    pub pose_camera: Pose,
    pub timestamp: f64,
}

/// Constant marker-to-interface transforms, keyed by marker id.
#[derive(Debug, Clone, PartialEq)]
pub struct PolyhedronGeometry {
    face_transforms: BTreeMap<u32, Pose>,
}

impl PolyhedronGeometry {
    pub fn new(face_transforms: BTreeMap<u32, Pose>) -> Result<Self, TrackerError> {
        if face_transforms.is_empty() {
            return Err(TrackerError::InvalidConfig("polyhedron needs at least one face".into()));
        }
        Ok(Self { face_transforms })
    }

    /// Markers on the five exposed faces of a 60 mm cube mounted on a 110 mm
    /// stem. Ids: 1 top (+z), 2 +x, 3 +y, 4 -x, 5 -y (interface frame).
    pub fn default_cube() -> Self {
        let half = CUBE_EDGE / 2.0;
        let center = Vector3::new(0.0, 0.0, STEM_OFFSET);
        let faces: [(u32, Vector3<f64>, UnitQuaternion<f64>); 5] = [
            (1, Vector3::z(), UnitQuaternion::identity()),
            (2, Vector3::x(), axis_angle(Vector3::y(), std::f64::consts::FRAC_PI_2)),
            (3, Vector3::y(), axis_angle(Vector3::x(), -std::f64::consts::FRAC_PI_2)),
            (4, -Vector3::x(), axis_angle(Vector3::y(), -std::f64::consts::FRAC_PI_2)),
            (5, -Vector3::y(), axis_angle(Vector3::x(), std::f64::consts::FRAC_PI_2)),
        ];
        let face_transforms = faces
            .iter()
            .map(|(id, normal, rot)| {
                let marker_in_interface = Pose::new(center + normal * half, *rot);
                (*id, invert(&marker_in_interface))
            })
            .collect();
        Self { face_transforms }
    }

    /// Same polyhedron with only the listed faces kept.
    pub fn restricted(&self, ids: &[u32]) -> Result<Self, TrackerError> {
        let mut faces = BTreeMap::new();
        for id in ids {
            let t = self.face_transform(*id)?;
            faces.insert(*id, t);
        }
        Self::new(faces)
    }

    pub fn n(&self) -> usize {
        self.face_transforms.len()
    }

    pub fn ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.face_transforms.keys().copied()
    }

    /// `T_{A_i I}`: interface frame expressed in the marker frame.
    pub fn face_transform(&self, id: u32) -> Result<Pose, TrackerError> {
        self.face_transforms.get(&id).copied().ok_or(TrackerError::UnknownMarker(id))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackerConfig {
    /// `T_{W_h C}`, fixed after calibration.
    pub camera_in_world: Pose,
    /// Cosine gate; faces with `alpha <= alpha_thr` are discarded.
    pub alpha_thr: f64,
    /// Seconds a held pose stays fresh after the last successful fusion.
    pub stale_timeout: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            camera_in_world: look_at(Vector3::new(0.0, -0.55, 0.96), Vector3::new(0.0, 0.0, 0.41)),
            alpha_thr: default_alpha_thr(),
            stale_timeout: 0.5,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<(), TrackerError> {
        if !(self.alpha_thr > 0.0 && self.alpha_thr < 1.0) {
            return Err(TrackerError::InvalidConfig(format!(
                "alpha_thr must lie in (0, 1), got {}",
                self.alpha_thr
            )));
        }
        if !(self.stale_timeout >= 0.0) {
            return Err(TrackerError::InvalidConfig("stale_timeout must be non-negative".into()));
        }
        Ok(())
    }
}

/// cos(50 deg).
pub fn default_alpha_thr() -> f64 {
    50f64.to_radians().cos()
}

/// Camera pose (z forward, x right, y down) at `eye` looking at `target`,
/// with world +z as the up reference.
pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>) -> Pose {
    let forward = (target - eye).normalize();
    let mut right = forward.cross(&Vector3::z());
    if right.norm() < 1e-9 {
        right = Vector3::x();
    }
    let right = right.normalize();
    let down = forward.cross(&right);
    let rot = Rotation3::from_matrix_unchecked(Matrix3::from_columns(&[right, down, forward]));
    Pose::new(eye, UnitQuaternion::from_rotation_matrix(&rot))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackedPose {
    /// `T_{W_h I}`.
    pub pose_world: Pose,
    pub weight_sum: f64,
    pub n_used: usize,
    pub stale: bool,
    /// Time of the fusion that produced `pose_world`.
    pub timestamp: f64,
}

/// Cosine between the line of sight and the reversed face normal.
/// Negative for back-facing markers; not clamped.
pub fn cosine_weight(obs: &MarkerObservation) -> Result<f64, TrackerError> {
    let p = obs.pose_camera.position;
    let p_norm = p.norm();
    if !(p_norm > 0.0) || !p_norm.is_finite() {
        return Err(TrackerError::DegenerateObservation(obs.marker_id));
    }
    let e_z = obs.pose_camera.orientation * Vector3::z();
    Ok((-e_z).dot(&p) / (e_z.norm() * p_norm))
}

/// Interface pose in the world implied by a single marker.
pub fn marker_world_estimate(
    obs: &MarkerObservation,
    geom: &PolyhedronGeometry,
    cfg: &TrackerConfig,
) -> Result<Pose, TrackerError> {
    let face = geom.face_transform(obs.marker_id)?;
    Ok(compose(&cfg.camera_in_world, &compose(&obs.pose_camera, &face)))
}

/// Fuses one tick of observations. Returns `None` when no face passes the gate.
/// Unknown or degenerate observations are skipped.
pub fn fuse(
    observations: &[MarkerObservation],
    geom: &PolyhedronGeometry,
    cfg: &TrackerConfig,
) -> Option<TrackedPose> {
    let mut estimates = Vec::with_capacity(observations.len());
    let mut weights = Vec::with_capacity(observations.len());
    let mut timestamp = f64::NEG_INFINITY;
    for obs in observations {
        let alpha = match cosine_weight(obs) {
            Ok(a) => a,
            Err(err) => {
                tracing::debug!(%err, "skipping observation");
                continue;
            }
        };
        if alpha <= cfg.alpha_thr {
            continue;
        }
        match marker_world_estimate(obs, geom, cfg) {
            Ok(est) => {
                estimates.push(est);
                weights.push(alpha);
                timestamp = timestamp.max(obs.timestamp);
            }
            Err(err) => tracing::debug!(%err, "skipping observation"),
        }
    }
    if estimates.is_empty() {
        return None;
    }
    let pose_world = weighted_pose_mean(&estimates, &weights).ok()?;
    Some(TrackedPose {
        pose_world,
        weight_sum: weights.iter().sum(),
        n_used: estimates.len(),
        stale: false,
        timestamp,
    })
}

/// Holds the last fused pose and flags it stale after a dropout longer than
/// the configured timeout.
#[derive(Debug, Clone)]
pub struct Tracker {
    geom: PolyhedronGeometry,
    cfg: TrackerConfig,
    last: Option<TrackedPose>,
    last_now: f64,
}

impl Tracker {
    pub fn new(geom: PolyhedronGeometry, cfg: TrackerConfig) -> Result<Self, TrackerError> {
        cfg.validate()?;
        Ok(Self {
            geom,
            cfg,
            last: None,
            last_now: f64::NEG_INFINITY,
        })
    }

    pub fn geometry(&self) -> &PolyhedronGeometry {
        &self.geom
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.cfg
    }

    pub fn last(&self) -> Option<&TrackedPose> {
        self.last.as_ref()
    }

    pub fn track_step(&mut self, observations: &[MarkerObservation], now: f64) -> Result<TrackedPose, TrackerError> {
        debug_assert!(now >= self.last_now, "tracker clock went backwards");
        self.last_now = now;
        if let Some(mut fused) = fuse(observations, &self.geom, &self.cfg) {
            fused.timestamp = now;
            self.last = Some(fused);
            return Ok(fused);
        }
        self.held(now)
    }

    /// Pushes a pose that was fused elsewhere (direct-pose mode).
    pub fn accept_direct(&mut self, pose_world: Pose, now: f64) -> TrackedPose {
        self.last_now = now;
        let tracked = TrackedPose {
            pose_world,
            weight_sum: 1.0,
            n_used: 1,
            stale: false,
            timestamp: now,
        };
        self.last = Some(tracked);
        tracked
    }

    /// Last pose with the stale flag evaluated at `now`.
    pub fn held(&self, now: f64) -> Result<TrackedPose, TrackerError> {
        let mut last = self.last.ok_or(TrackerError::NoPoseYet)?;
        last.stale = now - last.timestamp > self.cfg.stale_timeout;
        Ok(last)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    /// Per-axis standard deviation of the camera-frame position noise (m).
    pub pos_sigma: f64,
    /// Per-axis standard deviation of the rotation-vector perturbation (rad).
    pub rot_sigma: f64,
    pub flip_probability: f64,
    /// Faces whose true cosine lies in `(lo, hi]` may be flipped.
    pub flip_alpha_band: (f64, f64),
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self::noiseless()
    }
}

impl NoiseSpec {
    pub fn noiseless() -> Self {
        Self {
            pos_sigma: 0.0,
            rot_sigma: 0.0,
            flip_probability: 0.0,
            flip_alpha_band: (0.0, 0.0),
        }
    }
}

/// Marker-in-camera pose that exactly reproduces `interface_world` through the chain.
pub fn exact_observation(interface_world: &Pose, face: &Pose, cfg: &TrackerConfig) -> Pose {
    // T_CA = T_WC^-1 * T_WI * T_AI^-1
    compose(&compose(&invert(&cfg.camera_in_world), interface_world), &invert(face))
}

/// Synthesizes what a marker detector would report for the interface at
/// `true_interface_pose`. Only faces with a positive true cosine are emitted.
///
/// Random draws are consumed in a fixed order per emitted face (three position,
/// three rotation, one flip decision) so runs that differ only in
/// `flip_probability` share every noise sample.
pub fn synth_observe(
    true_interface_pose: &Pose,
    geom: &PolyhedronGeometry,
    cfg: &TrackerConfig,
    noise: &NoiseSpec,
    timestamp: f64,
    rng_seed: u64,
) -> Vec<MarkerObservation> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut out = Vec::with_capacity(geom.n());
    for id in geom.ids() {
        let face = geom.face_transform(id).expect("id from geometry");
        let exact = exact_observation(true_interface_pose, &face, cfg);
        let truth = MarkerObservation {
            marker_id: id,
            pose_camera: exact,
            timestamp,
        };
        let alpha = match cosine_weight(&truth) {
            Ok(a) if a > 0.0 => a,
            _ => continue,
        };

        let mut draw = || -> f64 { StandardNormal.sample(&mut rng) };
        let dp = Vector3::new(draw(), draw(), draw()) * noise.pos_sigma;
        let dr = Vector3::new(draw(), draw(), draw()) * noise.rot_sigma;
        let flip_draw: f64 = rng.random();

        let mut pose = exact;
        if noise.pos_sigma > 0.0 || noise.rot_sigma > 0.0 {
            pose = Pose::new(pose.position + dp, exp_rotation(&dr) * pose.orientation);
        }
        let (lo, hi) = noise.flip_alpha_band;
        if alpha > lo && alpha <= hi && flip_draw < noise.flip_probability {
            pose = ambiguity_flip(&pose);
        }
        out.push(MarkerObservation {
            marker_id: id,
            pose_camera: pose,
            timestamp,
        });
    }
    out
}

/// Mirrors the face normal across the line of sight with the smallest
/// rotation that does so. The cosine weight is preserved.
pub fn ambiguity_flip(pose_camera: &Pose) -> Pose {
    let ray = pose_camera.position.normalize();
    let n = pose_camera.orientation * Vector3::z();
    let mirrored = ray * (2.0 * n.dot(&ray)) - n;
    let rot = UnitQuaternion::rotation_between(&n, &mirrored).unwrap_or_else(|| {
        // n anti-parallel to its mirror means n is perpendicular to the ray:
        // rotate half a turn about the ray.
        axis_angle(ray, std::f64::consts::PI)
    });
    Pose::new(pose_camera.position, rot * pose_camera.orientation)
}

/// One line of an observation fixture: `{"t":..,"id":..,"p":[..],"q":[..]}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObservationRecord {
    pub t: f64,
    pub id: u32,
    pub p: [f64; 3],
    pub q: [f64; 4],
}

impl From<&MarkerObservation> for ObservationRecord {
    fn from(o: &MarkerObservation) -> Self {
        Self {
            t: o.timestamp,
            id: o.marker_id,
            p: o.pose_camera.p_array(),
            q: o.pose_camera.q_array(),
        }
    }
}

pub fn write_observation_log<W: Write>(mut out: W, observations: &[MarkerObservation]) -> std::io::Result<()> {
    for obs in observations {
        serde_json::to_writer(&mut out, &ObservationRecord::from(obs))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_observation_log<R: BufRead>(input: R) -> Result<Vec<MarkerObservation>, TrackerError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| TrackerError::Log {
            line: line_no,
            detail: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ObservationRecord = serde_json::from_str(&line).map_err(|e| TrackerError::Log {
            line: line_no,
            detail: e.to_string(),
        })?;
        let pose = Pose::from_arrays(rec.p, rec.q).map_err(|e| TrackerError::Log {
            line: line_no,
            detail: e.to_string(),
        })?;
        out.push(MarkerObservation {
            marker_id: rec.id,
            pose_camera: pose,
            timestamp: rec.t,
        });
    }
    Ok(out)
}

/// Splits a time-ordered observation stream into ticks of equal timestamp.
pub fn group_by_tick(observations: &[MarkerObservation]) -> Vec<&[MarkerObservation]> {
    observations.chunk_by(|a, b| a.timestamp == b.timestamp).collect()
}
