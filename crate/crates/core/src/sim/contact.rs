//! Penalty contact between the peg's eight corners and the static scene:
//! the table plane plus the hole fixture (four wall boxes and a base box).

use nalgebra::Vector3;

use super::SceneConfig;
use crate::se3::{Pose, Twist, Wrench};

/// Axis-aligned box in the hole frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StaticBox {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl StaticBox {
    /// Smallest push-out depth and the outward normal of that face, if the
    /// point is inside.
    fn penetration(&self, p: &Vector3<f64>) -> Option<(f64, Vector3<f64>)> {
        if (0..3).any(|i| p[i] <= self.min[i] || p[i] >= self.max[i]) {
            return None;
        }
        let mut best = (f64::INFINITY, Vector3::zeros());
        for i in 0..3 {
            let to_min = p[i] - self.min[i];
            let to_max = self.max[i] - p[i];
            if to_min < best.0 {
                let mut n = Vector3::zeros();
                n[i] = -1.0;
                best = (to_min, n);
            }
            if to_max < best.0 {
                let mut n = Vector3::zeros();
                n[i] = 1.0;
                best = (to_max, n);
            }
        }
        Some(best)
    }
}

/// Fixture boxes in the hole frame (origin at the mouth center, +z out of the hole).
pub fn fixture_boxes(scene: &SceneConfig) -> [StaticBox; 5] {
    let hx = scene.hole_inner[0] / 2.0;
    let hy = scene.hole_inner[1] / 2.0;
    let depth = scene.hole_inner[2];
    let w = scene.hole_wall;
    let b = scene.hole_base;
    let bx = |x0: f64, x1: f64, y0: f64, y1: f64, z0: f64, z1: f64| StaticBox {
        min: Vector3::new(x0, y0, z0),
        max: Vector3::new(x1, y1, z1),
    };
    [
        bx(hx, hx + w, -hy - w, hy + w, -depth, 0.0),
        bx(-hx - w, -hx, -hy - w, hy + w, -depth, 0.0),
        bx(-hx, hx, hy, hy + w, -depth, 0.0),
        bx(-hx, hx, -hy - w, -hy, -depth, 0.0),
        bx(-hx - w, hx + w, -hy - w, hy + w, -depth - b, -depth),
    ]
}

/// Peg corners in the peg frame.
pub fn peg_corners(dims: &[f64; 3]) -> [Vector3<f64>; 8] {
    let (a, b, c) = (dims[0] / 2.0, dims[1] / 2.0, dims[2] / 2.0);
    let mut out = [Vector3::zeros(); 8];
    let mut k = 0;
    for sx in [-1.0, 1.0] {
        for sy in [-1.0, 1.0] {
            for sz in [-1.0, 1.0] {
                out[k] = Vector3::new(sx * a, sy * b, sz * c);
                k += 1;
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContactPoint {
    /// World position of the penetrating corner.
    pub point: Vector3<f64>,
    /// Outward surface normal (world).
    pub normal: Vector3<f64>,
    pub depth: f64,
    /// Normal force magnitude, never negative.
    pub normal_force: f64,
    /// Total force applied to the peg at this corner.
    pub force: Vector3<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ContactResult {
    /// Net contact wrench on the peg, torque taken about the peg origin.
    pub wrench: Wrench,
    pub points: Vec<ContactPoint>,
}

/// Contact forces on a peg at `pose` moving with `twist` (linear velocity of
/// the peg origin, world-frame angular velocity).
pub fn contact_wrench(pose: &Pose, twist: &Twist, scene: &SceneConfig) -> ContactResult {
    let boxes = fixture_boxes(scene);
    let hole = &scene.hole_pose;
    let mut result = ContactResult::default();
    for corner in peg_corners(&scene.peg_dims) {
        let p = pose.transform_point(&corner);
        let lever = p - pose.position;
        let v = twist.linear + twist.angular.cross(&lever);

        let mut surfaces: [Option<(f64, Vector3<f64>)>; 6] = [None; 6];
        if p.z < 0.0 {
            surfaces[0] = Some((-p.z, Vector3::z()));
        }
        let local = hole.inverse_transform_point(&p);
        for (slot, b) in surfaces[1..].iter_mut().zip(boxes.iter()) {
            *slot = b.penetration(&local).map(|(d, n)| (d, hole.orientation * n));
        }

        for (depth, normal) in surfaces.into_iter().flatten() {
            let v_n = v.dot(&normal);
            let normal_force = scene.contact_stiffness * depth + scene.contact_damping * (-v_n).max(0.0);
            let v_t = v - normal * v_n;
            let slip = v_t.norm();
            // Coulomb friction, regularized to viscous below the slip threshold.
            let friction = if slip > 0.0 {
                -v_t * (scene.friction_mu * normal_force / slip.max(scene.friction_slip_eps))
            } else {
                Vector3::zeros()
            };
            let force = normal * normal_force + friction;
            result.wrench.force += force;
            result.wrench.torque += lever.cross(&force);
            result.points.push(ContactPoint {
                point: p,
                normal,
                depth,
                normal_force,
                force,
            });
        }
    }
    result
}
