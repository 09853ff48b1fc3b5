//! Scenario files: one TOML document holding the map reference, poses, gains,
//! limits and planner/sensor settings for a trial.
//!
//! Every field name carries its unit. Unknown keys are rejected. Sections
//! other than `map`, `start` and `object` are optional and fall back to the
//! defaults documented on each field.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::grid::{GridError, OccupancyGrid};
use crate::kinematics::{KinematicChain, KinematicsError};
use crate::model::{joint_vector, JointVector7, Pose2D};

pub const SCHEMA_VERSION: u32 = 1;
/// Translational speed cap of the base (m/s).
pub const BASE_SPEED_CAP: f64 = 0.5;

const DEFAULT_SCENARIO: &str = include_str!("../data/default_scenario.toml");
const DEFAULT_MAP: &str = include_str!("../data/default_map.txt");

/// Arm "ready" posture shared by leader and follower.
pub const READY_POSTURE: [f64; 7] = [
    0.0,
    -PI / 4.0,
    0.0,
    -3.0 * PI / 4.0,
    0.0,
    PI / 2.0,
    PI / 4.0,
];

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("{field}: {message}")]
    Schema { field: String, message: String },
    #[error("{field}: {message}")]
    Range { field: String, message: String },
    #[error("map: {0}")]
    Map(#[from] GridError),
    #[error("chain: {0}")]
    Chain(#[from] KinematicsError),
}

impl ScenarioError {
    fn range(field: &str, message: impl Into<String>) -> Self {
        ScenarioError::Range {
            field: field.to_string(),
            message: message.into(),
        }
    }

    /// Dotted path of the offending field, when known.
    pub fn field(&self) -> Option<&str> {
        match self {
            ScenarioError::Schema { field, .. } | ScenarioError::Range { field, .. } => Some(field),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapConfig {
    /// Text map, relative to the scenario file.
    pub path: String,
    pub resolution_m: f64,
    #[serde(default)]
    pub origin_x_m: f64,
    #[serde(default)]
    pub origin_y_m: f64,
    #[serde(default)]
    pub origin_gamma_rad: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanarPoseConfig {
    pub x_m: f64,
    pub y_m: f64,
    #[serde(default)]
    pub gamma_rad: f64,
}

impl PlanarPoseConfig {
    pub fn pose(&self) -> Pose2D {
        Pose2D::new(self.x_m, self.y_m, self.gamma_rad)
    }
}

/// Target object. `gamma_rad` is the heading from which the base approaches it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectConfig {
    pub x_m: f64,
    pub y_m: f64,
    /// Height of the grasp point above the floor.
    pub z_m: f64,
    #[serde(default)]
    pub gamma_rad: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainConfig {
    /// Chain definition file relative to the scenario; the bundled arm when absent.
    pub path: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArmsConfig {
    pub leader_home_q_rad: [f64; 7],
    pub follower_home_q_rad: [f64; 7],
    /// Viscous joint damping D (N·m·s/rad) of both simulated arms.
    pub joint_damping_nms_per_rad: f64,
    /// Follower arm base on the vehicle, in the vehicle frame.
    pub mount_x_m: f64,
    pub mount_y_m: f64,
    pub mount_z_m: f64,
    /// Fraction of the joint velocity limits used by the autonomous drop.
    pub drop_speed_scale: f64,
}

impl Default for ArmsConfig {
    fn default() -> Self {
        Self {
            leader_home_q_rad: READY_POSTURE,
            follower_home_q_rad: READY_POSTURE,
            joint_damping_nms_per_rad: 5.0,
            mount_x_m: 0.2,
            mount_y_m: 0.0,
            mount_z_m: 0.45,
            drop_speed_scale: 0.4,
        }
    }
}

/// Drop bin pose in the follower arm base frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BinConfig {
    pub x_m: f64,
    pub y_m: f64,
    pub z_m: f64,
    pub yaw_rad: f64,
    /// Height of the pre-drop waypoint above the bin.
    pub approach_height_m: f64,
}

impl Default for BinConfig {
    fn default() -> Self {
        Self {
            x_m: 0.05,
            y_m: -0.45,
            z_m: 0.15,
            yaw_rad: 0.0,
            approach_height_m: 0.15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GainsConfig {
    /// Follower mirroring stiffness Kp per joint.
    pub kp_nm_per_rad: [f64; 7],
    /// Follower mirroring damping Kd per joint.
    pub kd_nms_per_rad: [f64; 7],
    /// Reproduce the printed `+Kd * qdot` damping sign instead of `-Kd * qdot`.
    pub paper_literal_damping: bool,
    /// Null-space stiffness alpha; the damping is derived as 2*sqrt(alpha).
    pub nullspace_stiffness: f64,
    /// "current" (q_ns = q_lra) or "home" (q_ns = leader home).
    pub nullspace_target: NullspaceTarget,
    /// Diagonal of the navigation cue gain (x, y, z, roll, pitch, yaw).
    pub k_fmr_diag: [f64; 6],
    /// Diagonal of the manipulation guidance gain toward the grasp target.
    pub k_fra_diag: [f64; 6],
    pub kv_free: f64,
    pub kv_obstacle: f64,
    pub kr: f64,
    pub max_yaw_rate_radps: f64,
    /// Home-holding spring on the non-driving axes (x and yaw entries unused).
    pub hold_stiffness_diag: [f64; 6],
    pub hold_damping_diag: [f64; 6],
    /// Leader homing and joint-lock impedance.
    pub home_kp_nm_per_rad: f64,
    pub stiff_kp_nm_per_rad: f64,
}

impl Default for GainsConfig {
    fn default() -> Self {
        Self {
            kp_nm_per_rad: [400.0; 7],
            kd_nms_per_rad: [40.0; 7],
            paper_literal_damping: false,
            nullspace_stiffness: 25.0,
            nullspace_target: NullspaceTarget::Current,
            k_fmr_diag: [20.0, 20.0, 20.0, 5.0, 5.0, 10.0],
            k_fra_diag: [150.0, 150.0, 150.0, 0.0, 0.0, 0.0],
            kv_free: 0.5,
            kv_obstacle: 0.2,
            kr: -1.0,
            max_yaw_rate_radps: 1.0,
            hold_stiffness_diag: [0.0, 300.0, 300.0, 30.0, 30.0, 0.0],
            hold_damping_diag: [0.0, 40.0, 40.0, 4.0, 4.0, 0.0],
            home_kp_nm_per_rad: 400.0,
            stiff_kp_nm_per_rad: 1500.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NullspaceTarget {
    Current,
    Home,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VirtualBoundaryConfig {
    pub vb_i_m: f64,
    pub vb_e_m: f64,
}

impl Default for VirtualBoundaryConfig {
    fn default() -> Self {
        Self {
            vb_i_m: 0.05,
            vb_e_m: 0.4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlannerConfig {
    /// Ticks between planner updates (100 ticks = 10 Hz at 1 kHz).
    pub period_ticks: u32,
    pub dt_plan_s: f64,
    pub horizon_s: f64,
    /// Index of the rollout pose used as the cue target.
    pub lookahead_index: usize,
    pub v_samples: usize,
    pub w_samples: usize,
    pub v_min_mps: f64,
    pub v_max_mps: f64,
    pub w_max_radps: f64,
    pub accel_lin_mps2: f64,
    pub accel_ang_radps2: f64,
    /// Time over which the accel limits bound the dynamic window.
    pub window_time_s: f64,
    pub w_heading: f64,
    pub w_clearance: f64,
    pub w_velocity: f64,
    pub clearance_cap_m: f64,
    pub footprint_radius_m: f64,
    /// Arc length ahead on the global path used as the heading target.
    pub carrot_distance_m: f64,
    /// Forward speed is limited to this gain times the remaining path length.
    pub goal_slowdown_per_s: f64,
    /// Obstacle inflation used by the global planner.
    pub inflation_m: f64,
    /// Length of the straight final approach toward the object.
    pub approach_distance_m: f64,
    /// Distance from the arm base to the object at the goal.
    pub standoff_m: f64,
    /// Radius around the footprint inside which obstacles lower K_v.
    pub obstacle_near_m: f64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            period_ticks: 100,
            dt_plan_s: 0.025,
            horizon_s: 1.5,
            lookahead_index: 40,
            v_samples: 11,
            w_samples: 21,
            v_min_mps: 0.0,
            v_max_mps: 0.5,
            w_max_radps: 1.0,
            accel_lin_mps2: 1.0,
            accel_ang_radps2: 2.0,
            window_time_s: 0.5,
            w_heading: 0.6,
            w_clearance: 0.3,
            w_velocity: 0.1,
            clearance_cap_m: 1.0,
            footprint_radius_m: 0.45,
            carrot_distance_m: 1.0,
            goal_slowdown_per_s: 0.6,
            inflation_m: 0.55,
            approach_distance_m: 1.5,
            standoff_m: 0.32,
            obstacle_near_m: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VehicleConfig {
    pub wheelbase_m: f64,
    pub max_steer_rad: f64,
    /// Below this forward speed yaw-rate commands are suppressed.
    pub min_turn_speed_mps: f64,
}

impl Default for VehicleConfig {
    fn default() -> Self {
        Self {
            wheelbase_m: 0.65,
            max_steer_rad: 0.524,
            min_turn_speed_mps: 0.02,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LidarConfig {
    pub beams: usize,
    pub range_m: f64,
    pub span_rad: f64,
    pub mount_x_m: f64,
    pub period_ticks: u32,
}

impl Default for LidarConfig {
    fn default() -> Self {
        Self {
            beams: 360,
            range_m: 8.0,
            span_rad: 2.0 * PI,
            mount_x_m: 0.3,
            period_ticks: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraConfig {
    pub half_angle_rad: f64,
    pub min_range_m: f64,
    pub max_range_m: f64,
    /// Offset of the camera along the end-effector z axis.
    pub offset_m: f64,
    /// Zero-mean Gaussian position noise; 0 disables it.
    pub noise_sigma_m: f64,
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self {
            half_angle_rad: 0.5,
            min_range_m: 0.1,
            max_range_m: 1.5,
            offset_m: 0.05,
            noise_sigma_m: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SwitchingConfig {
    /// Consecutive planner ticks with the object graspable before switching.
    pub n_confirm: u32,
    pub align_eps_rad: f64,
    pub home_eps_rad: f64,
    /// Duration of the joint lock before the leader starts homing.
    pub stiffen_s: f64,
    pub grasp_eps_m: f64,
    pub graspable_x_min_m: f64,
    pub graspable_x_max_m: f64,
    pub graspable_half_width_m: f64,
    /// Pause at the release waypoint while the object falls.
    pub release_dwell_s: f64,
}

impl Default for SwitchingConfig {
    fn default() -> Self {
        Self {
            n_confirm: 5,
            align_eps_rad: 0.01,
            home_eps_rad: 0.01,
            stiffen_s: 0.3,
            grasp_eps_m: 0.02,
            graspable_x_min_m: 0.20,
            graspable_x_max_m: 0.45,
            graspable_half_width_m: 0.20,
            release_dwell_s: 0.3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub dt_s: f64,
    pub timeout_s: f64,
    pub abort_on_collision: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt_s: 0.001,
            timeout_s: 300.0,
            abort_on_collision: false,
        }
    }
}

/// Parameters of the scripted operators used by the trial harness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OperatorConfig {
    pub cruise_speed_mps: f64,
    pub pursuit_distance_m: f64,
    /// Spring (N/m) pulling the leader toward the displacement that yields
    /// the intended speed.
    pub tracking_gain_n_per_m: f64,
    pub tracking_damping_ns_per_m: f64,
    pub yaw_gain_nm_per_rad: f64,
    pub yaw_damping_nms_per_rad: f64,
    /// Multiplier on the rendered cue.
    pub compliance: f64,
    pub noise_force_n: f64,
    pub noise_torque_nm: f64,
    pub noise_time_constant_s: f64,
    /// Range of the amplitude of the operator's lateral wander around its plan.
    pub wander_amplitude_m: [f64; 2],
    pub wander_wavelength_m: [f64; 2],
    /// Obstacles of every class within this radius are seen on the cameras.
    pub vision_range_m: f64,
    pub inflation_m: f64,
    pub distraction_s: f64,
    pub distraction_gap_s: [f64; 2],
    pub manip_gain_n_per_m: f64,
    pub manip_damping_ns_per_m: f64,
    pub manip_rot_gain_nm_per_rad: f64,
    pub manip_rot_damping_nms_per_rad: f64,
    /// Initial error of the operator's estimate of the object position.
    pub estimate_error_m: f64,
    /// Time constant with which visual feedback shrinks that error.
    pub estimate_refine_s: f64,
    pub grasp_attempt_tolerance_m: f64,
    pub grasp_retry_s: f64,
    pub drop_delay_s: f64,
}

impl Default for OperatorConfig {
    fn default() -> Self {
        Self {
            cruise_speed_mps: 0.35,
            pursuit_distance_m: 1.0,
            tracking_gain_n_per_m: 150.0,
            tracking_damping_ns_per_m: 30.0,
            yaw_gain_nm_per_rad: 20.0,
            yaw_damping_nms_per_rad: 4.0,
            compliance: 1.0,
            noise_force_n: 3.0,
            noise_torque_nm: 1.0,
            noise_time_constant_s: 0.5,
            wander_amplitude_m: [0.1, 0.35],
            wander_wavelength_m: [3.0, 6.0],
            vision_range_m: 3.0,
            inflation_m: 0.7,
            distraction_s: 1.5,
            distraction_gap_s: [10.0, 30.0],
            manip_gain_n_per_m: 150.0,
            manip_damping_ns_per_m: 40.0,
            manip_rot_gain_nm_per_rad: 10.0,
            manip_rot_damping_nms_per_rad: 2.0,
            estimate_error_m: 0.06,
            estimate_refine_s: 3.0,
            grasp_attempt_tolerance_m: 0.012,
            grasp_retry_s: 0.5,
            drop_delay_s: 0.3,
        }
    }
}

/// Parsed and validated scenario document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    pub map: MapConfig,
    pub start: PlanarPoseConfig,
    pub object: ObjectConfig,
    #[serde(default)]
    pub chain: ChainConfig,
    #[serde(default)]
    pub arms: ArmsConfig,
    #[serde(default)]
    pub bin: BinConfig,
    #[serde(default)]
    pub gains: GainsConfig,
    #[serde(default)]
    pub virtual_boundary: VirtualBoundaryConfig,
    #[serde(default)]
    pub planner: PlannerConfig,
    #[serde(default)]
    pub vehicle: VehicleConfig,
    #[serde(default)]
    pub lidar: LidarConfig,
    #[serde(default)]
    pub camera: CameraConfig,
    #[serde(default)]
    pub switching: SwitchingConfig,
    #[serde(default)]
    pub sim: SimConfig,
    #[serde(default)]
    pub operator: OperatorConfig,
}

/// Splits a toml error message into the field path it refers to (if any).
fn toml_error_field(err: &toml::de::Error) -> Option<String> {
    let msg = err.message();
    if let Some(rest) = msg.strip_prefix("unknown field `") {
        return rest.split('`').next().map(str::to_string);
    }
    if let Some(rest) = msg.strip_prefix("missing field `") {
        return rest.split('`').next().map(str::to_string);
    }
    None
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self, ScenarioError> {
        let cfg: ScenarioConfig = toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map(|s| text[..s.start.min(text.len())].lines().count().max(1))
                .unwrap_or(0);
            match toml_error_field(&e) {
                Some(field) => ScenarioError::Schema {
                    field,
                    message: format!("{} (line {line})", e.message()),
                },
                None => ScenarioError::Parse(format!("line {line}: {}", e.message())),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario config serializes")
    }

    pub fn builtin_default() -> Self {
        Self::from_toml(DEFAULT_SCENARIO).expect("bundled scenario is valid")
    }

    pub fn leader_home(&self) -> JointVector7 {
        joint_vector(self.arms.leader_home_q_rad)
    }

    pub fn follower_home(&self) -> JointVector7 {
        joint_vector(self.arms.follower_home_q_rad)
    }

    /// Range and consistency checks. Errors name the offending field.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        use ScenarioError as E;
        if self.schema_version != SCHEMA_VERSION {
            return Err(E::Schema {
                field: "schema_version".into(),
                message: format!("unsupported version {} (expected {SCHEMA_VERSION})", self.schema_version),
            });
        }
        let positive = |field: &str, v: f64| -> Result<(), ScenarioError> {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(E::range(field, format!("must be positive and finite, got {v}")))
            }
        };
        let non_negative = |field: &str, v: f64| -> Result<(), ScenarioError> {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(E::range(field, format!("must be non-negative and finite, got {v}")))
            }
        };
        let finite = |field: &str, v: f64| -> Result<(), ScenarioError> {
            if v.is_finite() {
                Ok(())
            } else {
                Err(E::range(field, "must be finite"))
            }
        };

        positive("map.resolution_m", self.map.resolution_m)?;
        finite("map.origin_x_m", self.map.origin_x_m)?;
        finite("map.origin_y_m", self.map.origin_y_m)?;
        finite("map.origin_gamma_rad", self.map.origin_gamma_rad)?;
        finite("start.x_m", self.start.x_m)?;
        finite("start.y_m", self.start.y_m)?;
        finite("start.gamma_rad", self.start.gamma_rad)?;
        finite("object.x_m", self.object.x_m)?;
        finite("object.y_m", self.object.y_m)?;
        finite("object.gamma_rad", self.object.gamma_rad)?;
        non_negative("object.z_m", self.object.z_m)?;

        let a = &self.arms;
        positive("arms.joint_damping_nms_per_rad", a.joint_damping_nms_per_rad)?;
        non_negative("arms.mount_z_m", a.mount_z_m)?;
        finite("arms.mount_x_m", a.mount_x_m)?;
        finite("arms.mount_y_m", a.mount_y_m)?;
        if !(a.drop_speed_scale > 0.0 && a.drop_speed_scale <= 1.0) {
            return Err(E::range("arms.drop_speed_scale", "must lie in (0, 1]"));
        }
        let align = self.switching.align_eps_rad;
        for i in 0..7 {
            finite(&format!("arms.leader_home_q_rad[{i}]"), a.leader_home_q_rad[i])?;
            finite(&format!("arms.follower_home_q_rad[{i}]"), a.follower_home_q_rad[i])?;
            if (a.leader_home_q_rad[i] - a.follower_home_q_rad[i]).abs() >= align {
                return Err(E::range(
                    &format!("arms.follower_home_q_rad[{i}]"),
                    "leader and follower home postures must agree within switching.align_eps_rad",
                ));
            }
        }

        positive("bin.approach_height_m", self.bin.approach_height_m)?;

        let g = &self.gains;
        for i in 0..7 {
            non_negative(&format!("gains.kp_nm_per_rad[{i}]"), g.kp_nm_per_rad[i])?;
            non_negative(&format!("gains.kd_nms_per_rad[{i}]"), g.kd_nms_per_rad[i])?;
        }
        non_negative("gains.nullspace_stiffness", g.nullspace_stiffness)?;
        for i in 0..6 {
            non_negative(&format!("gains.k_fmr_diag[{i}]"), g.k_fmr_diag[i])?;
            non_negative(&format!("gains.k_fra_diag[{i}]"), g.k_fra_diag[i])?;
            non_negative(&format!("gains.hold_stiffness_diag[{i}]"), g.hold_stiffness_diag[i])?;
            non_negative(&format!("gains.hold_damping_diag[{i}]"), g.hold_damping_diag[i])?;
        }
        positive("gains.kv_free", g.kv_free)?;
        positive("gains.kv_obstacle", g.kv_obstacle)?;
        finite("gains.kr", g.kr)?;
        if g.kr == 0.0 {
            return Err(E::range("gains.kr", "must be non-zero"));
        }
        positive("gains.max_yaw_rate_radps", g.max_yaw_rate_radps)?;
        positive("gains.home_kp_nm_per_rad", g.home_kp_nm_per_rad)?;
        positive("gains.stiff_kp_nm_per_rad", g.stiff_kp_nm_per_rad)?;

        let vb = &self.virtual_boundary;
        positive("virtual_boundary.vb_i_m", vb.vb_i_m)?;
        positive("virtual_boundary.vb_e_m", vb.vb_e_m)?;
        if !(vb.vb_i_m < vb.vb_e_m) {
            return Err(E::range(
                "virtual_boundary.vb_e_m",
                format!("must exceed vb_i_m ({} >= {})", vb.vb_i_m, vb.vb_e_m),
            ));
        }

        let p = &self.planner;
        if p.period_ticks == 0 {
            return Err(E::range("planner.period_ticks", "must be at least 1"));
        }
        positive("planner.dt_plan_s", p.dt_plan_s)?;
        if p.v_samples < 3 {
            return Err(E::range("planner.v_samples", "must be at least 3"));
        }
        if p.w_samples < 3 {
            return Err(E::range("planner.w_samples", "must be at least 3"));
        }
        if p.horizon_s < (p.lookahead_index as f64 + 1.0) * p.dt_plan_s - 1e-12 {
            return Err(E::range(
                "planner.horizon_s",
                "must cover lookahead_index + 1 rollout samples",
            ));
        }
        if p.horizon_s < 41.0 * p.dt_plan_s - 1e-12 {
            return Err(E::range("planner.horizon_s", "must be at least 41 * dt_plan_s"));
        }
        non_negative("planner.v_min_mps", p.v_min_mps)?;
        positive("planner.v_max_mps", p.v_max_mps)?;
        if p.v_max_mps > BASE_SPEED_CAP || p.v_min_mps > p.v_max_mps {
            return Err(E::range("planner.v_max_mps", "must satisfy v_min <= v_max <= 0.5"));
        }
        positive("planner.w_max_radps", p.w_max_radps)?;
        positive("planner.accel_lin_mps2", p.accel_lin_mps2)?;
        positive("planner.accel_ang_radps2", p.accel_ang_radps2)?;
        positive("planner.window_time_s", p.window_time_s)?;
        non_negative("planner.w_heading", p.w_heading)?;
        non_negative("planner.w_clearance", p.w_clearance)?;
        non_negative("planner.w_velocity", p.w_velocity)?;
        positive("planner.clearance_cap_m", p.clearance_cap_m)?;
        positive("planner.footprint_radius_m", p.footprint_radius_m)?;
        positive("planner.carrot_distance_m", p.carrot_distance_m)?;
        positive("planner.goal_slowdown_per_s", p.goal_slowdown_per_s)?;
        if !(p.inflation_m >= p.footprint_radius_m) {
            return Err(E::range("planner.inflation_m", "must be at least footprint_radius_m"));
        }
        positive("planner.approach_distance_m", p.approach_distance_m)?;
        positive("planner.standoff_m", p.standoff_m)?;
        non_negative("planner.obstacle_near_m", p.obstacle_near_m)?;

        let v = &self.vehicle;
        positive("vehicle.wheelbase_m", v.wheelbase_m)?;
        if !(v.max_steer_rad > 0.0 && v.max_steer_rad < PI / 2.0) {
            return Err(E::range("vehicle.max_steer_rad", "must lie in (0, pi/2)"));
        }
        positive("vehicle.min_turn_speed_mps", v.min_turn_speed_mps)?;

        let l = &self.lidar;
        if l.beams == 0 {
            return Err(E::range("lidar.beams", "must be positive"));
        }
        positive("lidar.range_m", l.range_m)?;
        if !(l.span_rad > 0.0 && l.span_rad <= 2.0 * PI) {
            return Err(E::range("lidar.span_rad", "must lie in (0, 2*pi]"));
        }
        if l.period_ticks == 0 {
            return Err(E::range("lidar.period_ticks", "must be at least 1"));
        }

        let c = &self.camera;
        if !(c.half_angle_rad > 0.0 && c.half_angle_rad < PI / 2.0) {
            return Err(E::range("camera.half_angle_rad", "must lie in (0, pi/2)"));
        }
        non_negative("camera.min_range_m", c.min_range_m)?;
        if !(c.min_range_m < c.max_range_m) {
            return Err(E::range("camera.max_range_m", "must exceed min_range_m"));
        }
        non_negative("camera.noise_sigma_m", c.noise_sigma_m)?;

        let s = &self.switching;
        if s.n_confirm == 0 {
            return Err(E::range("switching.n_confirm", "must be at least 1"));
        }
        positive("switching.align_eps_rad", s.align_eps_rad)?;
        positive("switching.home_eps_rad", s.home_eps_rad)?;
        non_negative("switching.stiffen_s", s.stiffen_s)?;
        positive("switching.grasp_eps_m", s.grasp_eps_m)?;
        non_negative("switching.graspable_x_min_m", s.graspable_x_min_m)?;
        if !(s.graspable_x_min_m < s.graspable_x_max_m) {
            return Err(E::range("switching.graspable_x_max_m", "must exceed graspable_x_min_m"));
        }
        positive("switching.graspable_half_width_m", s.graspable_half_width_m)?;
        non_negative("switching.release_dwell_s", s.release_dwell_s)?;

        positive("sim.dt_s", self.sim.dt_s)?;
        positive("sim.timeout_s", self.sim.timeout_s)?;

        let o = &self.operator;
        positive("operator.cruise_speed_mps", o.cruise_speed_mps)?;
        if o.cruise_speed_mps > BASE_SPEED_CAP {
            return Err(E::range("operator.cruise_speed_mps", "must not exceed 0.5"));
        }
        positive("operator.pursuit_distance_m", o.pursuit_distance_m)?;
        positive("operator.tracking_gain_n_per_m", o.tracking_gain_n_per_m)?;
        non_negative("operator.tracking_damping_ns_per_m", o.tracking_damping_ns_per_m)?;
        positive("operator.yaw_gain_nm_per_rad", o.yaw_gain_nm_per_rad)?;
        non_negative("operator.yaw_damping_nms_per_rad", o.yaw_damping_nms_per_rad)?;
        non_negative("operator.compliance", o.compliance)?;
        non_negative("operator.noise_force_n", o.noise_force_n)?;
        non_negative("operator.noise_torque_nm", o.noise_torque_nm)?;
        positive("operator.noise_time_constant_s", o.noise_time_constant_s)?;
        for (name, r) in [
            ("operator.wander_amplitude_m", o.wander_amplitude_m),
            ("operator.wander_wavelength_m", o.wander_wavelength_m),
            ("operator.distraction_gap_s", o.distraction_gap_s),
        ] {
            non_negative(name, r[0])?;
            if !(r[0] <= r[1]) || !r[1].is_finite() {
                return Err(E::range(name, "expected [low, high] with low <= high"));
            }
        }
        positive("operator.wander_wavelength_m", o.wander_wavelength_m[0])?;
        positive("operator.distraction_gap_s", o.distraction_gap_s[0])?;
        positive("operator.vision_range_m", o.vision_range_m)?;
        positive("operator.inflation_m", o.inflation_m)?;
        non_negative("operator.distraction_s", o.distraction_s)?;
        positive("operator.manip_gain_n_per_m", o.manip_gain_n_per_m)?;
        non_negative("operator.manip_damping_ns_per_m", o.manip_damping_ns_per_m)?;
        non_negative("operator.manip_rot_gain_nm_per_rad", o.manip_rot_gain_nm_per_rad)?;
        non_negative("operator.manip_rot_damping_nms_per_rad", o.manip_rot_damping_nms_per_rad)?;
        non_negative("operator.estimate_error_m", o.estimate_error_m)?;
        positive("operator.estimate_refine_s", o.estimate_refine_s)?;
        positive("operator.grasp_attempt_tolerance_m", o.grasp_attempt_tolerance_m)?;
        positive("operator.grasp_retry_s", o.grasp_retry_s)?;
        non_negative("operator.drop_delay_s", o.drop_delay_s)?;
        Ok(())
    }
}

/// Reads and validates a scenario file.
pub fn load_scenario(path: &Path) -> Result<ScenarioConfig, ScenarioError> {
    let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.display().to_string(),
        source,
    })?;
    ScenarioConfig::from_toml(&text)
}

/// A scenario with its map and chain resolved.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub grid: OccupancyGrid,
    pub chain: KinematicChain,
    /// Map text as read, kept so records are self-contained.
    pub map_text: String,
    pub chain_text: String,
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let config = load_scenario(path)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
        let read = |rel: &str| -> Result<String, ScenarioError> {
            let p = base.join(rel);
            std::fs::read_to_string(&p).map_err(|source| ScenarioError::Io {
                path: p.display().to_string(),
                source,
            })
        };
        let map_text = read(&config.map.path)?;
        let chain_text = match &config.chain.path {
            Some(p) => read(p)?,
            None => KinematicChain::panda_toml().to_string(),
        };
        Self::from_parts(config, map_text, chain_text)
    }

    pub fn from_parts(config: ScenarioConfig, map_text: String, chain_text: String) -> Result<Self, ScenarioError> {
        config.validate()?;
        let origin = Pose2D::new(config.map.origin_x_m, config.map.origin_y_m, config.map.origin_gamma_rad);
        let grid = OccupancyGrid::parse(&map_text, config.map.resolution_m, origin)?;
        let chain = KinematicChain::from_toml(&chain_text)?;
        for (name, home) in [
            ("arms.leader_home_q_rad", config.leader_home()),
            ("arms.follower_home_q_rad", config.follower_home()),
        ] {
            if !chain.within_limits(&home) {
                return Err(ScenarioError::range(name, "outside the chain's joint limits"));
            }
        }
        let start = config.start.pose();
        let start_cell = grid.world_to_grid(start.x, start.y).map_err(|_| ScenarioError::range("start", "outside the map"))?;
        if grid.class(start_cell).is_occupied() {
            return Err(ScenarioError::range("start", "inside an obstacle"));
        }
        grid.world_to_grid(config.object.x_m, config.object.y_m)
            .map_err(|_| ScenarioError::range("object", "outside the map"))?;
        Ok(Self {
            config,
            grid,
            chain,
            map_text,
            chain_text,
        })
    }

    /// The bundled scenario and map.
    pub fn builtin_default() -> Self {
        Self::from_parts(
            ScenarioConfig::builtin_default(),
            DEFAULT_MAP.to_string(),
            KinematicChain::panda_toml().to_string(),
        )
        .expect("bundled scenario resolves")
    }

    pub fn default_scenario_toml() -> &'static str {
        DEFAULT_SCENARIO
    }

    pub fn default_map_text() -> &'static str {
        DEFAULT_MAP
    }

    /// SHA-256 over the canonical config, map and chain text.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.config.to_toml().as_bytes());
        h.update([0u8]);
        h.update(self.map_text.as_bytes());
        h.update([0u8]);
        h.update(self.chain_text.as_bytes());
        hex_digest(&h.finalize())
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
