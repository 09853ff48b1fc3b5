//! Forward kinematics, geometric Jacobian, pseudo-inverse and null-space
//! projector for a 7-joint revolute serial chain.

use std::path::Path;

use nalgebra::{Isometry3, Matrix3, Matrix6, Rotation3, Translation3, UnitQuaternion, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Jacobian6x7, JointVector7, Matrix7, Matrix7x6, Pose6};

pub const JOINTS: usize = 7;
pub const CHAIN_SCHEMA_VERSION: u32 = 1;

/// Singular values below this fraction of the largest one are treated as zero.
pub const PINV_RELATIVE_CUTOFF: f64 = 1e-6;

const PANDA_CHAIN: &str = include_str!("../data/panda_chain.toml");

#[derive(Debug, Error)]
pub enum KinematicsError {
    #[error("joint {joint} at {value} rad is outside [{lower}, {upper}]")]
    JointLimit {
        joint: usize,
        value: f64,
        lower: f64,
        upper: f64,
    },
    #[error("joint vector is not finite")]
    NonFinite,
    #[error("chain definition: {0}")]
    Definition(String),
    #[error("chain file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("inverse kinematics did not converge (residual {residual:.4})")]
    IkFailed { residual: f64 },
}

/// One modified-DH row: `RotX(alpha) * TransX(a) * RotZ(theta_offset + q) * TransZ(d)`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DhRow {
    pub a_m: f64,
    pub d_m: f64,
    pub alpha_rad: f64,
    #[serde(default)]
    pub theta_offset_rad: f64,
}

impl DhRow {
    pub fn transform(&self, q: f64) -> Isometry3<f64> {
        let rx = UnitQuaternion::from_axis_angle(&Vector3::x_axis(), self.alpha_rad);
        let rz = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), self.theta_offset_rad + q);
        Isometry3::from_parts(Translation3::identity(), rx)
            * Isometry3::translation(self.a_m, 0.0, 0.0)
            * Isometry3::from_parts(Translation3::identity(), rz)
            * Isometry3::translation(0.0, 0.0, self.d_m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointSpec {
    pub a_m: f64,
    pub d_m: f64,
    pub alpha_rad: f64,
    #[serde(default)]
    pub theta_offset_rad: f64,
    pub lower_rad: f64,
    pub upper_rad: f64,
    pub torque_limit_nm: f64,
    pub velocity_limit_radps: f64,
}

impl JointSpec {
    fn row(&self) -> DhRow {
        DhRow {
            a_m: self.a_m,
            d_m: self.d_m,
            alpha_rad: self.alpha_rad,
            theta_offset_rad: self.theta_offset_rad,
        }
    }
}

/// On-disk chain definition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainFile {
    pub schema_version: u32,
    pub name: String,
    #[serde(default)]
    pub tool: DhRow,
    pub joints: Vec<JointSpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KinematicChain {
    name: String,
    rows: [DhRow; JOINTS],
    tool: Isometry3<f64>,
    lower: JointVector7,
    upper: JointVector7,
    torque_limits: JointVector7,
    velocity_limits: JointVector7,
}

impl KinematicChain {
    pub fn from_file(file: &ChainFile) -> Result<Self, KinematicsError> {
        if file.schema_version != CHAIN_SCHEMA_VERSION {
            return Err(KinematicsError::Definition(format!(
                "schema_version {} is not supported (expected {})",
                file.schema_version, CHAIN_SCHEMA_VERSION
            )));
        }
        if file.joints.len() != JOINTS {
            return Err(KinematicsError::Definition(format!(
                "expected exactly {JOINTS} joints, found {}",
                file.joints.len()
            )));
        }
        let mut rows = [DhRow::default(); JOINTS];
        let mut lower = JointVector7::zeros();
        let mut upper = JointVector7::zeros();
        let mut torque = JointVector7::zeros();
        let mut velocity = JointVector7::zeros();
        for (i, j) in file.joints.iter().enumerate() {
            let finite = [j.a_m, j.d_m, j.alpha_rad, j.theta_offset_rad, j.lower_rad, j.upper_rad]
                .iter()
                .all(|v| v.is_finite());
            if !finite {
                return Err(KinematicsError::Definition(format!("joints[{i}]: non-finite parameter")));
            }
            if !(j.lower_rad < j.upper_rad) {
                return Err(KinematicsError::Definition(format!(
                    "joints[{i}]: lower_rad must be below upper_rad"
                )));
            }
            if !(j.torque_limit_nm > 0.0) || !(j.velocity_limit_radps > 0.0) {
                return Err(KinematicsError::Definition(format!(
                    "joints[{i}]: torque and velocity limits must be positive"
                )));
            }
            rows[i] = j.row();
            lower[i] = j.lower_rad;
            upper[i] = j.upper_rad;
            torque[i] = j.torque_limit_nm;
            velocity[i] = j.velocity_limit_radps;
        }
        Ok(Self {
            name: file.name.clone(),
            rows,
            tool: file.tool.transform(0.0),
            lower,
            upper,
            torque_limits: torque,
            velocity_limits: velocity,
        })
    }

    pub fn from_toml(text: &str) -> Result<Self, KinematicsError> {
        let file: ChainFile = toml::from_str(text).map_err(|e| KinematicsError::Definition(e.to_string()))?;
        Self::from_file(&file)
    }

    pub fn load(path: &Path) -> Result<Self, KinematicsError> {
        let text = std::fs::read_to_string(path).map_err(|source| KinematicsError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    /// The bundled 7-DoF arm definition.
    pub fn panda() -> Self {
        Self::from_toml(PANDA_CHAIN).expect("bundled chain definition is valid")
    }

    pub fn panda_toml() -> &'static str {
        PANDA_CHAIN
    }

    /// Returns a copy with an extra fixed transform appended after the tool.
    pub fn append_fixed(&self, row: DhRow) -> Self {
        let mut c = self.clone();
        c.tool *= row.transform(0.0);
        c
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn lower(&self) -> &JointVector7 {
        &self.lower
    }

    pub fn upper(&self) -> &JointVector7 {
        &self.upper
    }

    pub fn torque_limits(&self) -> &JointVector7 {
        &self.torque_limits
    }

    pub fn velocity_limits(&self) -> &JointVector7 {
        &self.velocity_limits
    }

    pub fn check_limits(&self, q: &JointVector7) -> Result<(), KinematicsError> {
        for i in 0..JOINTS {
            let v = q[i];
            if !v.is_finite() {
                return Err(KinematicsError::NonFinite);
            }
            if v < self.lower[i] || v > self.upper[i] {
                return Err(KinematicsError::JointLimit {
                    joint: i,
                    value: v,
                    lower: self.lower[i],
                    upper: self.upper[i],
                });
            }
        }
        Ok(())
    }

    pub fn within_limits(&self, q: &JointVector7) -> bool {
        self.check_limits(q).is_ok()
    }

    pub fn clamp(&self, q: &JointVector7) -> JointVector7 {
        q.zip_zip_map(&self.lower, &self.upper, |v, lo, hi| v.clamp(lo, hi))
    }

    /// Joint frames (after each joint rotation) and the end-effector frame.
    fn frames(&self, q: &JointVector7) -> ([Isometry3<f64>; JOINTS], Isometry3<f64>) {
        let mut t = Isometry3::identity();
        let mut frames = [Isometry3::identity(); JOINTS];
        for i in 0..JOINTS {
            t *= self.rows[i].transform(q[i]);
            frames[i] = t;
        }
        (frames, t * self.tool)
    }

    /// End-effector transform without limit checking.
    pub fn fk_unchecked(&self, q: &JointVector7) -> Isometry3<f64> {
        self.frames(q).1
    }

    pub fn end_effector(&self, q: &JointVector7) -> Result<Isometry3<f64>, KinematicsError> {
        self.check_limits(q)?;
        Ok(self.fk_unchecked(q))
    }

    /// End-effector pose in the chain base frame.
    pub fn forward_kinematics(&self, q: &JointVector7) -> Result<Pose6, KinematicsError> {
        Ok(Pose6::from_isometry(&self.end_effector(q)?))
    }

    pub fn jacobian_unchecked(&self, q: &JointVector7) -> Jacobian6x7 {
        let (frames, ee) = self.frames(q);
        let p_ee = ee.translation.vector;
        let mut j = Jacobian6x7::zeros();
        for (i, f) in frames.iter().enumerate() {
            let z = f.rotation * Vector3::z();
            let p = f.translation.vector;
            let lin = z.cross(&(p_ee - p));
            j.fixed_view_mut::<3, 1>(0, i).copy_from(&lin);
            j.fixed_view_mut::<3, 1>(3, i).copy_from(&z);
        }
        j
    }

    /// Geometric Jacobian at `q`, world-frame angular velocity convention.
    pub fn jacobian(&self, q: &JointVector7) -> Result<Jacobian6x7, KinematicsError> {
        self.check_limits(q)?;
        Ok(self.jacobian_unchecked(q))
    }

    /// End-effector transform and Jacobian in one pass.
    pub fn fk_and_jacobian(&self, q: &JointVector7) -> (Isometry3<f64>, Jacobian6x7) {
        (self.fk_unchecked(q), self.jacobian_unchecked(q))
    }
}

/// Moore–Penrose pseudo-inverse with relative singular-value truncation.
pub fn pinv(j: &Jacobian6x7) -> Matrix7x6 {
    let svd = j.svd(true, true);
    let (Some(u), Some(v_t)) = (svd.u, svd.v_t) else {
        return Matrix7x6::zeros();
    };
    let sigma_max = svd.singular_values.max();
    if !(sigma_max > 0.0) {
        return Matrix7x6::zeros();
    }
    let cutoff = PINV_RELATIVE_CUTOFF * sigma_max;
    let mut out = Matrix7x6::zeros();
    for (k, s) in svd.singular_values.iter().enumerate() {
        if *s > cutoff {
            out += (v_t.row(k).transpose() / *s) * u.column(k).transpose();
        }
    }
    out
}

/// Pseudo-inverse of `J^T` (6×7), i.e. `pinv(J)^T`.
pub fn pinv_transpose(j: &Jacobian6x7) -> nalgebra::SMatrix<f64, 6, 7> {
    pinv(j).transpose()
}

/// `N = I - J^T pinv(J^T)`: projects joint torques onto those producing no
/// end-effector wrench.
pub fn nullspace_projector(j: &Jacobian6x7) -> Matrix7 {
    Matrix7::identity() - j.transpose() * pinv_transpose(j)
}

/// Rotation error `log(R_target * R^T)` as a world-frame rotation vector.
pub fn rotation_error(target: &Rotation3<f64>, current: &Rotation3<f64>) -> Vector3<f64> {
    (target * current.transpose()).scaled_axis()
}

/// Pose error (position, rotation vector) from `current` toward `target`.
pub fn pose_error(target: &Isometry3<f64>, current: &Isometry3<f64>) -> Vector6<f64> {
    let dp = target.translation.vector - current.translation.vector;
    let dr = rotation_error(
        &target.rotation.to_rotation_matrix(),
        &current.rotation.to_rotation_matrix(),
    );
    Vector6::new(dp.x, dp.y, dp.z, dr.x, dr.y, dr.z)
}

#[derive(Debug, Clone, Copy)]
pub struct IkOptions {
    pub max_iterations: usize,
    pub position_tolerance: f64,
    pub rotation_tolerance: f64,
    pub damping: f64,
    pub max_step: f64,
}

impl Default for IkOptions {
    fn default() -> Self {
        Self {
            max_iterations: 500,
            position_tolerance: 1e-4,
            rotation_tolerance: 1e-3,
            damping: 0.05,
            max_step: 0.2,
        }
    }
}

/// Damped least-squares inverse kinematics for a full pose target, starting
/// from `seed` and staying within joint limits.
pub fn solve_ik(
    chain: &KinematicChain,
    target: &Isometry3<f64>,
    seed: &JointVector7,
    opts: &IkOptions,
) -> Result<JointVector7, KinematicsError> {
    let mut q = chain.clamp(seed);
    let lambda2 = opts.damping * opts.damping;
    let mut residual = f64::INFINITY;
    for _ in 0..opts.max_iterations {
        let (ee, j) = chain.fk_and_jacobian(&q);
        let e = pose_error(target, &ee);
        let pos_err = e.fixed_rows::<3>(0).norm();
        let rot_err = e.fixed_rows::<3>(3).norm();
        residual = pos_err + rot_err;
        if pos_err < opts.position_tolerance && rot_err < opts.rotation_tolerance {
            return Ok(q);
        }
        let jjt: Matrix6<f64> = j * j.transpose() + Matrix6::identity() * lambda2;
        let Some(inv) = jjt.try_inverse() else {
            break;
        };
        let mut dq = j.transpose() * (inv * e);
        // pull toward the seed in the null space to keep the elbow posture
        let n = nullspace_projector(&j);
        dq += n * ((seed - q) * 0.1);
        let step = dq.amax();
        if step > opts.max_step {
            dq *= opts.max_step / step;
        }
        q = chain.clamp(&(q + dq));
    }
    Err(KinematicsError::IkFailed { residual })
}

/// Skew-symmetric matrix of `v`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}
