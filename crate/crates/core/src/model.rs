//! Shared geometric vocabulary: planar and spatial poses, joint vectors,
//! wrenches and base velocity commands.
//!
//! Frames: the world frame is planar with +z up. Headings are measured
//! counter-clockwise from world +x. Spatial orientations are roll/pitch/yaw
//! with `R = Rz(yaw) * Ry(pitch) * Rx(roll)`.

use std::f64::consts::{PI, TAU};

use nalgebra::{Isometry3, Rotation3, SMatrix, SVector, Translation3, UnitQuaternion, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Seven joint positions (rad), velocities (rad/s) or torques (N·m).
pub type JointVector7 = SVector<f64, 7>;
/// Geometric Jacobian mapping joint velocities to the world-frame twist
/// `(v_x, v_y, v_z, w_x, w_y, w_z)`.
pub type Jacobian6x7 = SMatrix<f64, 6, 7>;
pub type Matrix7 = SMatrix<f64, 7, 7>;
pub type Matrix7x6 = SMatrix<f64, 7, 6>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("angle is not finite: {0}")]
    NonFiniteAngle(f64),
}

/// Wraps `a` into `(-pi, pi]`.
///
/// Rejects NaN and infinities instead of propagating them.
pub fn normalize_angle(a: f64) -> Result<f64, ModelError> {
    if !a.is_finite() {
        return Err(ModelError::NonFiniteAngle(a));
    }
    Ok(wrap_angle(a))
}

/// Infallible variant of [`normalize_angle`] for values already known to be
/// finite. Non-finite input yields NaN.
pub fn wrap_angle(a: f64) -> f64 {
    let r = a.rem_euclid(TAU);
    if r > PI {
        r - TAU
    } else {
        r
    }
}

/// Planar pose of the mobile base (or of any planar frame).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose2D {
    pub x: f64,
    pub y: f64,
    pub gamma: f64,
}

impl Pose2D {
    pub fn new(x: f64, y: f64, gamma: f64) -> Self {
        Self {
            x,
            y,
            gamma: wrap_angle(gamma),
        }
    }

    pub fn distance(&self, other: &Pose2D) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    /// Expresses a world point in this pose's body frame.
    pub fn to_body(&self, x: f64, y: f64) -> (f64, f64) {
        let (s, c) = self.gamma.sin_cos();
        let dx = x - self.x;
        let dy = y - self.y;
        (c * dx + s * dy, -s * dx + c * dy)
    }

    /// Maps a body-frame point to the world frame.
    pub fn to_world(&self, bx: f64, by: f64) -> (f64, f64) {
        let (s, c) = self.gamma.sin_cos();
        (self.x + c * bx - s * by, self.y + s * bx + c * by)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.gamma.is_finite()
    }
}

/// End-effector pose: position in meters plus roll/pitch/yaw in radians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose6 {
    pub position: Vector3<f64>,
    /// (roll, pitch, yaw)
    pub rpy: [f64; 3],
}

impl Pose6 {
    pub fn new(position: Vector3<f64>, roll: f64, pitch: f64, yaw: f64) -> Self {
        Self {
            position,
            rpy: [wrap_angle(roll), wrap_angle(pitch), wrap_angle(yaw)],
        }
    }

    pub fn from_isometry(iso: &Isometry3<f64>) -> Self {
        let (roll, pitch, yaw) = iso.rotation.euler_angles();
        Self::new(iso.translation.vector, roll, pitch, yaw)
    }

    pub fn rotation(&self) -> Rotation3<f64> {
        Rotation3::from_euler_angles(self.rpy[0], self.rpy[1], self.rpy[2])
    }

    pub fn to_isometry(&self) -> Isometry3<f64> {
        Isometry3::from_parts(
            Translation3::from(self.position),
            UnitQuaternion::from_rotation_matrix(&self.rotation()),
        )
    }

    pub fn x(&self) -> f64 {
        self.position.x
    }

    pub fn y(&self) -> f64 {
        self.position.y
    }

    pub fn z(&self) -> f64 {
        self.position.z
    }

    pub fn yaw(&self) -> f64 {
        self.rpy[2]
    }

    pub fn is_finite(&self) -> bool {
        self.position.iter().all(|v| v.is_finite()) && self.rpy.iter().all(|v| v.is_finite())
    }
}

/// Six-axis force/torque. Force in N, torque in N·m.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Wrench6 {
    pub force: Vector3<f64>,
    pub torque: Vector3<f64>,
}

impl Wrench6 {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn new(force: Vector3<f64>, torque: Vector3<f64>) -> Self {
        Self { force, torque }
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Self {
            force: Vector3::new(v[0], v[1], v[2]),
            torque: Vector3::new(v[3], v[4], v[5]),
        }
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        Self::from_vector(&Vector6::from(a))
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(
            self.force.x,
            self.force.y,
            self.force.z,
            self.torque.x,
            self.torque.y,
            self.torque.z,
        )
    }

    pub fn to_array(&self) -> [f64; 6] {
        self.to_vector().into()
    }

    pub fn scale(&self, k: f64) -> Self {
        Self {
            force: self.force * k,
            torque: self.torque * k,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.force.iter().chain(self.torque.iter()).all(|v| *v == 0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.force.iter().chain(self.torque.iter()).all(|v| v.is_finite())
    }
}

impl std::ops::Add for Wrench6 {
    type Output = Wrench6;

    fn add(self, rhs: Wrench6) -> Wrench6 {
        Wrench6 {
            force: self.force + rhs.force,
            torque: self.torque + rhs.torque,
        }
    }
}

/// Forward speed (m/s) and yaw rate (rad/s) command for the base.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BaseVelocity {
    pub v_x: f64,
    pub v_gamma: f64,
}

impl BaseVelocity {
    pub const ZERO: BaseVelocity = BaseVelocity { v_x: 0.0, v_gamma: 0.0 };

    pub fn new(v_x: f64, v_gamma: f64) -> Self {
        Self { v_x, v_gamma }
    }

    pub fn is_zero(&self) -> bool {
        self.v_x == 0.0 && self.v_gamma == 0.0
    }
}

pub fn joint_vector(values: [f64; 7]) -> JointVector7 {
    JointVector7::from(values)
}

pub fn joint_array(v: &JointVector7) -> [f64; 7] {
    (*v).into()
}

/// Largest per-joint absolute difference.
pub fn max_abs_diff(a: &JointVector7, b: &JointVector7) -> f64 {
    (a - b).amax()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_angle(0.0).unwrap(), 0.0);
        assert!((normalize_angle(1.5 * PI).unwrap() + PI / 2.0).abs() < 1e-12);
        assert_eq!(normalize_angle(-PI).unwrap(), PI);
        assert_eq!(normalize_angle(PI).unwrap(), PI);
    }

    #[test]
    fn normalize_rejects_non_finite() {
        assert!(normalize_angle(f64::NAN).is_err());
        assert!(normalize_angle(f64::INFINITY).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]
        #[test]
        fn normalize_is_idempotent_and_in_range(a in -1.0e4f64..1.0e4) {
            let n = normalize_angle(a).unwrap();
            prop_assert!(n > -PI && n <= PI);
            prop_assert_eq!(normalize_angle(n).unwrap(), n);
            // congruent modulo 2pi
            let k = ((a - n) / TAU).round();
            prop_assert!((a - n - k * TAU).abs() < 1e-9);
        }
    }

    #[test]
    fn body_world_round_trip() {
        let p = Pose2D::new(1.0, -2.0, 0.7);
        let (bx, by) = p.to_body(3.0, 4.0);
        let (wx, wy) = p.to_world(bx, by);
        assert!((wx - 3.0).abs() < 1e-12 && (wy - 4.0).abs() < 1e-12);
    }

    #[test]
    fn pose6_isometry_round_trip() {
        let p = Pose6::new(Vector3::new(0.3, -0.1, 0.5), 3.0, 0.2, -1.1);
        let q = Pose6::from_isometry(&p.to_isometry());
        assert!((p.position - q.position).norm() < 1e-12);
        for i in 0..3 {
            assert!(wrap_angle(p.rpy[i] - q.rpy[i]).abs() < 1e-9);
        }
    }
}
