//! Rigid-transform algebra used everywhere else in the crate.
//!
//! Quaternions follow the Hamilton convention with scalar-first serialization
//! `(w, x, y, z)`; frames are right-handed. A [`Pose`] maps points expressed in
//! its child frame into its parent frame, so `compose(a, b)` is the homogeneous
//! product `A * B`.

use std::f64::consts::PI;
use std::fmt;

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Se3Error {
    #[error("pose and weight lists differ in length ({poses} vs {weights})")]
    LengthMismatch { poses: usize, weights: usize },
    #[error("cannot average an empty pose list")]
    Empty,
    #[error("weights must be finite and non-negative with at least one positive entry")]
    DegenerateWeights,
    #[error("quaternion has zero or non-finite norm")]
    DegenerateQuaternion,
}

/// Position (meters) plus unit-quaternion orientation.
#[derive(Clone, Copy, PartialEq)]
pub struct Pose {
    pub position: Vector3<f64>,
    pub orientation: UnitQuaternion<f64>,
}

impl fmt::Debug for Pose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let q = self.orientation.quaternion();
        write!(
            f,
            "Pose {{ p: [{}, {}, {}], q: [{}, {}, {}, {}] }}",
            self.position.x, self.position.y, self.position.z, q.w, q.i, q.j, q.k
        )
    }
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            position: Vector3::zeros(),
            orientation: UnitQuaternion::identity(),
        }
    }

    pub fn new(position: Vector3<f64>, orientation: UnitQuaternion<f64>) -> Self {
        Self {
            position,
            orientation: renormalized(orientation),
        }
    }

    pub fn from_translation(x: f64, y: f64, z: f64) -> Self {
        Self::new(Vector3::new(x, y, z), UnitQuaternion::identity())
    }

    pub fn from_rotation(orientation: UnitQuaternion<f64>) -> Self {
        Self::new(Vector3::zeros(), orientation)
    }

    /// Builds a pose from raw `[w, x, y, z]` coefficients, normalizing them.
    pub fn from_arrays(p: [f64; 3], q: [f64; 4]) -> Result<Self, Se3Error> {
        let quat = Quaternion::new(q[0], q[1], q[2], q[3]);
        let norm = quat.norm();
        if !norm.is_finite() || norm == 0.0 {
            return Err(Se3Error::DegenerateQuaternion);
        }
        Ok(Self {
            position: Vector3::from(p),
            orientation: UnitQuaternion::new_unchecked(quat / norm),
        })
    }

    pub fn p_array(&self) -> [f64; 3] {
        [self.position.x, self.position.y, self.position.z]
    }

    /// Orientation as `[w, x, y, z]`.
    pub fn q_array(&self) -> [f64; 4] {
        let q = self.orientation.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.orientation.to_rotation_matrix().into_inner()
    }

    /// Applies the transform to a point expressed in the child frame.
    pub fn transform_point(&self, point: &Vector3<f64>) -> Vector3<f64> {
        self.orientation * point + self.position
    }

    pub fn inverse_transform_point(&self, point: &Vector3<f64>) -> Vector3<f64> {
        self.orientation.inverse() * (point - self.position)
    }

    /// Norm of the stored quaternion coefficients. Poses built through the
    /// constructors are unit; deserialized ones keep their bits untouched.
    pub fn quaternion_norm(&self) -> f64 {
        self.orientation.quaternion().norm()
    }

    pub fn is_finite(&self) -> bool {
        self.p_array().iter().chain(self.q_array().iter()).all(|v| v.is_finite())
    }

    /// Translation distance and geodesic angle to another pose.
    pub fn distance_to(&self, other: &Pose) -> (f64, f64) {
        (
            (self.position - other.position).norm(),
            geodesic_angle(&self.orientation, &other.orientation),
        )
    }
}

/// Homogeneous product `a * b`.
pub fn compose(a: &Pose, b: &Pose) -> Pose {
    Pose {
        position: a.orientation * b.position + a.position,
        orientation: renormalized(a.orientation * b.orientation),
    }
}

pub fn invert(t: &Pose) -> Pose {
    let inv = t.orientation.inverse();
    Pose {
        position: -(inv * t.position),
        orientation: renormalized(inv),
    }
}

/// Rotation angle in `[0, pi]` between two orientations.
pub fn geodesic_angle(a: &UnitQuaternion<f64>, b: &UnitQuaternion<f64>) -> f64 {
    // chord = 2 sin(angle/4); asin stays accurate for tiny angles where acos does not.
    let chord = if a.quaternion().dot(b.quaternion()) >= 0.0 {
        (a.quaternion() - b.quaternion()).norm()
    } else {
        (a.quaternion() + b.quaternion()).norm()
    };
    4.0 * (chord / 2.0).min(1.0).asin()
}

/// Axis-angle vector of `desired * current^-1`, angle wrapped to `(-pi, pi]`.
pub fn orientation_error(desired: &UnitQuaternion<f64>, current: &UnitQuaternion<f64>) -> Vector3<f64> {
    let q = desired.quaternion() * current.quaternion().conjugate();
    let (w, v) = if q.w < 0.0 {
        (-q.w, -q.imag())
    } else {
        (q.w, q.imag())
    };
    let s = v.norm();
    if s == 0.0 {
        return Vector3::zeros();
    }
    let angle = 2.0 * s.atan2(w);
    debug_assert!(angle <= PI + 1e-12);
    v * (angle / s)
}

/// Weighted average of poses.
///
/// Positions are averaged linearly with normalized weights. Orientations use
/// the chordal mean: every quaternion is flipped into the hemisphere of the
/// heaviest one, summed with normalized weights and renormalized. This is the
/// exact minimizer of the weighted chordal cost `sum w_i |q_i - q|^2` over
/// sign-aligned unit quaternions, and it always returns a valid rigid transform.
pub fn weighted_pose_mean(poses: &[Pose], weights: &[f64]) -> Result<Pose, Se3Error> {
    if poses.len() != weights.len() {
        return Err(Se3Error::LengthMismatch {
            poses: poses.len(),
            weights: weights.len(),
        });
    }
    if poses.is_empty() {
        return Err(Se3Error::Empty);
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Se3Error::DegenerateWeights);
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Se3Error::DegenerateWeights);
    }

    // A single contributor is returned bit-for-bit.
    let mut positive = weights.iter().enumerate().filter(|(_, w)| **w > 0.0);
    if let (Some((only, _)), None) = (positive.next(), positive.next()) {
        return Ok(poses[only]);
    }

    let reference = weights
        .iter()
        .enumerate()
        .fold(0, |best, (i, w)| if *w > weights[best] { i } else { best });
    let q_ref = *poses[reference].orientation.quaternion();

    let mut position = Vector3::zeros();
    let mut quat = Quaternion::new(0.0, 0.0, 0.0, 0.0);
    for (pose, w) in poses.iter().zip(weights) {
        let wn = w / total;
        position += pose.position * wn;
        let q = pose.orientation.quaternion();
        if q.dot(&q_ref) < 0.0 {
            quat -= q * wn;
        } else {
            quat += q * wn;
        }
    }
    let norm = quat.norm();
    if !(norm > 0.0) {
        return Err(Se3Error::DegenerateWeights);
    }
    Ok(Pose {
        position,
        orientation: UnitQuaternion::new_unchecked(quat / norm),
    })
}

fn renormalized(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    let raw = q.into_inner();
    let n = raw.norm();
    if n == 1.0 || n == 0.0 {
        UnitQuaternion::new_unchecked(raw)
    } else {
        UnitQuaternion::new_unchecked(raw / n)
    }
}

/// Wire/log shape of a pose: `{"p":[x,y,z],"q":[w,x,y,z]}`.
#[derive(Serialize, Deserialize)]
struct PoseRepr {
    p: [f64; 3],
    q: [f64; 4],
}

impl Serialize for Pose {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        PoseRepr {
            p: self.p_array(),
            q: self.q_array(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Pose {
    /// Keeps the quaternion bits exactly as written so serialized poses
    /// round-trip; only zero or non-finite quaternions are rejected. Callers
    /// that accept hand-written input should pass the result through
    /// [`Pose::normalized`].
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let repr = PoseRepr::deserialize(deserializer)?;
        let q = Quaternion::new(repr.q[0], repr.q[1], repr.q[2], repr.q[3]);
        let n = q.norm();
        if !n.is_finite() || n == 0.0 {
            return Err(serde::de::Error::custom("quaternion has zero or non-finite norm"));
        }
        Ok(Pose {
            position: Vector3::from(repr.p),
            orientation: UnitQuaternion::new_unchecked(q),
        })
    }
}

impl Pose {
    pub fn normalized(self) -> Self {
        Self::new(self.position, self.orientation)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Twist {
    /// m/s
    pub linear: Vector3<f64>,
    /// rad/s
    pub angular: Vector3<f64>,
}

impl Twist {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn is_finite(&self) -> bool {
        self.linear.iter().chain(self.angular.iter()).all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Wrench {
    /// N
    pub force: Vector3<f64>,
    /// N*m
    pub torque: Vector3<f64>,
}

impl Wrench {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn is_finite(&self) -> bool {
        self.force.iter().chain(self.torque.iter()).all(|v| v.is_finite())
    }
}

impl std::ops::Add for Wrench {
    type Output = Wrench;
    fn add(self, rhs: Wrench) -> Wrench {
        Wrench {
            force: self.force + rhs.force,
            torque: self.torque + rhs.torque,
        }
    }
}

impl std::ops::AddAssign for Wrench {
    fn add_assign(&mut self, rhs: Wrench) {
        self.force += rhs.force;
        self.torque += rhs.torque;
    }
}

#[derive(Serialize, Deserialize)]
struct TwistRepr {
    v: [f64; 3],
    w: [f64; 3],
}

impl Serialize for Twist {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        TwistRepr {
            v: self.linear.into(),
            w: self.angular.into(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Twist {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let r = TwistRepr::deserialize(deserializer)?;
        Ok(Twist {
            linear: r.v.into(),
            angular: r.w.into(),
        })
    }
}

#[derive(Serialize, Deserialize)]
struct WrenchRepr {
    f: [f64; 3],
    tau: [f64; 3],
}

impl Serialize for Wrench {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        WrenchRepr {
            f: self.force.into(),
            tau: self.torque.into(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Wrench {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let r = WrenchRepr::deserialize(deserializer)?;
        Ok(Wrench {
            force: r.f.into(),
            torque: r.tau.into(),
        })
    }
}

/// Rotation of `angle` radians about a (not necessarily unit) axis.
pub fn axis_angle(axis: Vector3<f64>, angle: f64) -> UnitQuaternion<f64> {
    match nalgebra::Unit::try_new(axis, 0.0) {
        Some(a) => UnitQuaternion::from_axis_angle(&a, angle),
        None => UnitQuaternion::identity(),
    }
}

/// Quaternion for the rotation vector `v` (axis * angle).
pub fn exp_rotation(v: &Vector3<f64>) -> UnitQuaternion<f64> {
    let angle = v.norm();
    if angle == 0.0 {
        return UnitQuaternion::identity();
    }
    let half = 0.5 * angle;
    let s = half.sin() / angle;
    UnitQuaternion::new_unchecked(Quaternion::new(half.cos(), v.x * s, v.y * s, v.z * s))
}
