//! Leader and follower torque laws, the leader-to-base velocity mapping with
//! virtual boundaries, the guidance cues, and the leader lock/home behavior.

use nalgebra::{Isometry3, Vector3, Vector6};
use thiserror::Error;

use crate::kinematics::{nullspace_projector, rotation_error, KinematicChain};
use crate::model::{wrap_angle, BaseVelocity, Jacobian6x7, JointVector7, Pose2D, Pose6, Wrench6};
use crate::scenario::{GainsConfig, VirtualBoundaryConfig, BASE_SPEED_CAP};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControlError {
    #[error("{0} must be non-negative and finite")]
    NegativeGain(&'static str),
    #[error("virtual boundary requires 0 < vb_i < vb_e (got {vb_i}, {vb_e})")]
    BoundaryOrder { vb_i: f64, vb_e: f64 },
}

/// Blending selector: navigation (0) or manipulation (1).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Phi {
    Navigation,
    Manipulation,
}

impl Phi {
    pub fn value(self) -> f64 {
        match self {
            Phi::Navigation => 0.0,
            Phi::Manipulation => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerGains {
    pub kp: JointVector7,
    pub kd: JointVector7,
    alpha: f64,
    beta: f64,
    pub k_fmr: [f64; 6],
    pub k_fra: [f64; 6],
    pub kv_free: f64,
    pub kv_obstacle: f64,
    pub kr: f64,
    pub max_yaw_rate: f64,
    pub paper_literal_damping: bool,
}

impl ControllerGains {
    pub fn new(kp: JointVector7, kd: JointVector7, alpha: f64) -> Result<Self, ControlError> {
        if kp.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(ControlError::NegativeGain("Kp"));
        }
        if kd.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(ControlError::NegativeGain("Kd"));
        }
        if !(alpha.is_finite() && alpha >= 0.0) {
            return Err(ControlError::NegativeGain("alpha"));
        }
        let d = GainsConfig::default();
        Ok(Self {
            kp,
            kd,
            alpha,
            beta: 2.0 * alpha.sqrt(),
            k_fmr: d.k_fmr_diag,
            k_fra: d.k_fra_diag,
            kv_free: d.kv_free,
            kv_obstacle: d.kv_obstacle,
            kr: d.kr,
            max_yaw_rate: d.max_yaw_rate_radps,
            paper_literal_damping: false,
        })
    }

    pub fn from_config(c: &GainsConfig) -> Result<Self, ControlError> {
        let mut g = Self::new(JointVector7::from(c.kp_nm_per_rad), JointVector7::from(c.kd_nms_per_rad), c.nullspace_stiffness)?;
        if c.k_fmr_diag.iter().chain(&c.k_fra_diag).any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(ControlError::NegativeGain("cue gain"));
        }
        g.k_fmr = c.k_fmr_diag;
        g.k_fra = c.k_fra_diag;
        g.kv_free = c.kv_free;
        g.kv_obstacle = c.kv_obstacle;
        g.kr = c.kr;
        g.max_yaw_rate = c.max_yaw_rate_radps;
        g.paper_literal_damping = c.paper_literal_damping;
        Ok(g)
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Null-space damping, always `2 * sqrt(alpha)`.
    pub fn beta(&self) -> f64 {
        self.beta
    }
}

/// Diagonal spring-damper holding the leader near home on the non-driving axes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HoldGains {
    pub stiffness: [f64; 6],
    pub damping: [f64; 6],
}

impl HoldGains {
    pub fn from_config(c: &GainsConfig) -> Self {
        Self {
            stiffness: c.hold_stiffness_diag,
            damping: c.hold_damping_diag,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VirtualBoundary {
    vb_i: f64,
    vb_e: f64,
}

impl VirtualBoundary {
    pub fn new(vb_i: f64, vb_e: f64) -> Result<Self, ControlError> {
        if vb_i > 0.0 && vb_i < vb_e && vb_e.is_finite() {
            Ok(Self { vb_i, vb_e })
        } else {
            Err(ControlError::BoundaryOrder { vb_i, vb_e })
        }
    }

    pub fn from_config(c: &VirtualBoundaryConfig) -> Result<Self, ControlError> {
        Self::new(c.vb_i_m, c.vb_e_m)
    }

    pub fn vb_i(&self) -> f64 {
        self.vb_i
    }

    pub fn vb_e(&self) -> f64 {
        self.vb_e
    }
}

impl Default for VirtualBoundary {
    fn default() -> Self {
        Self { vb_i: 0.05, vb_e: 0.4 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BoundaryStatus {
    InsideDeadzone,
    Active,
    Beyond,
}

impl BoundaryStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            BoundaryStatus::InsideDeadzone => "inside_deadzone",
            BoundaryStatus::Active => "active",
            BoundaryStatus::Beyond => "beyond",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaseVelocityOutput {
    pub velocity: BaseVelocity,
    pub status: BoundaryStatus,
    /// Raised when the leader left the outer boundary and must return home.
    pub home_return: bool,
}

/// Command sent to the leader arm each tick.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LeaderCommand {
    pub torque: JointVector7,
    /// Lock the joints with maximal impedance.
    pub stiffen: bool,
    /// Drive the joints to the home posture.
    pub home: bool,
}

impl LeaderCommand {
    pub fn torque(torque: JointVector7) -> Self {
        Self {
            torque,
            stiffen: false,
            home: false,
        }
    }
}

/// Clamps each joint torque to `±limits`. Signs are preserved.
pub fn saturate(tau: &JointVector7, limits: &JointVector7) -> JointVector7 {
    tau.zip_map(limits, |t, l| t.clamp(-l, l))
}

/// Null-space damping torque for a given Jacobian.
pub fn nullspace_torque_with_jacobian(
    j: &Jacobian6x7,
    q: &JointVector7,
    qdot: &JointVector7,
    q_ns: &JointVector7,
    gains: &ControllerGains,
) -> JointVector7 {
    let n = nullspace_projector(j);
    n * ((q_ns - q) * gains.alpha - qdot * gains.beta)
}

pub fn nullspace_torque(
    chain: &KinematicChain,
    q: &JointVector7,
    qdot: &JointVector7,
    q_ns: Option<&JointVector7>,
    gains: &ControllerGains,
) -> JointVector7 {
    let j = chain.jacobian_unchecked(q);
    nullspace_torque_with_jacobian(&j, q, qdot, q_ns.unwrap_or(q), gains)
}

/// Blended leader torque, saturated to `limits`.
pub fn leader_torque(
    phi: Phi,
    tau_ns: &JointVector7,
    j: &Jacobian6x7,
    f_fra: &Wrench6,
    f_fmr: &Wrench6,
    tau_t: &JointVector7,
    limits: &JointVector7,
) -> JointVector7 {
    let jt = j.transpose();
    let tau = match phi {
        Phi::Manipulation => tau_ns + jt * f_fra.to_vector(),
        Phi::Navigation => tau_ns + tau_t + jt * f_fmr.to_vector(),
    };
    saturate(&tau, limits)
}

/// Task-space home-holding wrench. `pose` and `home` are end-effector poses in
/// the arm base frame, `twist` the end-effector twist. The x and yaw entries
/// are always zero: those axes drive the base.
pub fn hold_wrench(pose: &Isometry3<f64>, home: &Isometry3<f64>, twist: &Vector6<f64>, gains: &HoldGains) -> Wrench6 {
    let dp = pose.translation.vector - home.translation.vector;
    let dr = rotation_error(&pose.rotation.to_rotation_matrix(), &home.rotation.to_rotation_matrix());
    let err = Vector6::new(dp.x, dp.y, dp.z, dr.x, dr.y, dr.z);
    let mut w = Vector6::zeros();
    for i in [1, 2, 3, 4] {
        w[i] = -gains.stiffness[i] * err[i] - gains.damping[i] * twist[i];
    }
    Wrench6::from_vector(&w)
}

pub fn hold_torque(
    pose: &Isometry3<f64>,
    home: &Isometry3<f64>,
    twist: &Vector6<f64>,
    j: &Jacobian6x7,
    gains: &HoldGains,
) -> JointVector7 {
    j.transpose() * hold_wrench(pose, home, twist, gains).to_vector()
}

/// Follower joint torque mirroring the leader posture, saturated to `limits`.
pub fn follower_mirror_torque(
    q_lra: &JointVector7,
    q_fra: &JointVector7,
    qdot_fra: &JointVector7,
    gains: &ControllerGains,
    limits: &JointVector7,
) -> JointVector7 {
    let sign = if gains.paper_literal_damping { 1.0 } else { -1.0 };
    let tau = (q_lra - q_fra).component_mul(&gains.kp) + sign * qdot_fra.component_mul(&gains.kd);
    saturate(&tau, limits)
}

/// Maps the leader end-effector offset from home to a base velocity command.
pub fn base_velocity_from_leader(
    p_lra: &Pose6,
    p_home: &Pose6,
    vb: &VirtualBoundary,
    gains: &ControllerGains,
    obstacle_near: bool,
) -> BaseVelocityOutput {
    let d = p_lra.x() - p_home.x();
    let dgamma = wrap_angle(p_lra.yaw() - p_home.yaw());
    base_velocity_from_offset(d, dgamma, vb, gains, obstacle_near)
}

/// Same mapping from the raw driving-axis offset `d` and yaw offset.
pub fn base_velocity_from_offset(
    d: f64,
    dgamma: f64,
    vb: &VirtualBoundary,
    gains: &ControllerGains,
    obstacle_near: bool,
) -> BaseVelocityOutput {
    if d.abs() > vb.vb_e {
        return BaseVelocityOutput {
            velocity: BaseVelocity::ZERO,
            status: BoundaryStatus::Beyond,
            home_return: true,
        };
    }
    let v_gamma = (gains.kr * dgamma).clamp(-gains.max_yaw_rate, gains.max_yaw_rate);
    let (v_x, status) = if d.abs() < vb.vb_i {
        (0.0, BoundaryStatus::InsideDeadzone)
    } else {
        let kv = if obstacle_near { gains.kv_obstacle } else { gains.kv_free };
        let v = (kv * d / (vb.vb_e - vb.vb_i)).clamp(-BASE_SPEED_CAP, BASE_SPEED_CAP);
        (v, BoundaryStatus::Active)
    };
    BaseVelocityOutput {
        velocity: BaseVelocity::new(v_x, v_gamma),
        status,
        home_return: false,
    }
}

/// Navigation cue in the base body frame: a force along the heading and a yaw
/// torque toward the lookahead pose.
pub fn navigation_cue(p_fmr: &Pose2D, p_lookahead: &Pose2D, k_fmr: &[f64; 6]) -> Wrench6 {
    let (s, c) = p_fmr.gamma.sin_cos();
    let dx = (p_lookahead.x - p_fmr.x) * c + (p_lookahead.y - p_fmr.y) * s;
    let dgamma = wrap_angle(p_lookahead.gamma - p_fmr.gamma);
    Wrench6::new(Vector3::new(k_fmr[0] * dx, 0.0, 0.0), Vector3::new(0.0, 0.0, k_fmr[5] * dgamma))
}

/// Expresses a body-frame navigation cue on the leader. Leader +x drives the
/// base forward; the yaw axis is mirrored when `kr` is negative.
pub fn cue_to_leader_frame(cue: &Wrench6, kr: f64) -> Wrench6 {
    Wrench6::new(cue.force, Vector3::new(cue.torque.x, cue.torque.y, kr.signum() * cue.torque.z))
}

/// Guidance toward the grasp target during manipulation, in the arm base frame.
pub fn manipulation_cue(target: &Vector3<f64>, ee: &Vector3<f64>, k_fra: &[f64; 6]) -> Wrench6 {
    let e = target - ee;
    Wrench6::new(Vector3::new(k_fra[0] * e.x, k_fra[1] * e.y, k_fra[2] * e.z), Vector3::zeros())
}

/// What the mode logic asks of the leader arm.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LeaderRequest {
    /// Keep doing what it is doing.
    Continue,
    /// Lock, then home while locked (mode switch).
    SwitchHandshake,
    /// Home without locking (virtual boundary exceeded).
    ReturnHome,
    /// Lock indefinitely (autonomous follower motion).
    Hold,
    /// Back to torque mode.
    Release,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LeaderPhase {
    Normal,
    Locked { remaining_ticks: u32 },
    Homing,
    ReturnHome,
    Hold,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LeaderState {
    pub phase: LeaderPhase,
}

impl Default for LeaderState {
    fn default() -> Self {
        Self {
            phase: LeaderPhase::Normal,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LeaderBehaviorParams {
    pub stiffen_ticks: u32,
    pub home_eps: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LeaderStepOutput {
    pub state: LeaderState,
    pub command: LeaderCommand,
    /// Set on the tick the leader reaches home after a homing phase.
    pub homed: bool,
}

/// Advances the leader lock/home behavior by one tick. `torque` is the
/// blended torque used when the leader is in normal mode.
pub fn leader_behavior_step(
    request: LeaderRequest,
    state: &LeaderState,
    q: &JointVector7,
    q_home: &JointVector7,
    torque: &JointVector7,
    params: &LeaderBehaviorParams,
) -> LeaderStepOutput {
    let mut phase = match request {
        LeaderRequest::Continue => state.phase,
        LeaderRequest::SwitchHandshake => LeaderPhase::Locked {
            remaining_ticks: params.stiffen_ticks,
        },
        LeaderRequest::ReturnHome => match state.phase {
            // an ongoing handshake already homes the arm
            LeaderPhase::Locked { .. } | LeaderPhase::Homing => state.phase,
            _ => LeaderPhase::ReturnHome,
        },
        LeaderRequest::Hold => LeaderPhase::Hold,
        LeaderRequest::Release => LeaderPhase::Normal,
    };
    let at_home = (q - q_home).amax() < params.home_eps;
    let mut homed = false;
    if let LeaderPhase::Locked { remaining_ticks } = phase {
        phase = if remaining_ticks == 0 {
            LeaderPhase::Homing
        } else {
            LeaderPhase::Locked {
                remaining_ticks: remaining_ticks - 1,
            }
        };
    }
    if matches!(phase, LeaderPhase::Homing | LeaderPhase::ReturnHome) && at_home {
        phase = LeaderPhase::Normal;
        homed = true;
    }
    let zero = JointVector7::zeros();
    let command = match phase {
        LeaderPhase::Normal => LeaderCommand::torque(*torque),
        LeaderPhase::Locked { .. } | LeaderPhase::Hold => LeaderCommand {
            torque: zero,
            stiffen: true,
            home: false,
        },
        LeaderPhase::Homing => LeaderCommand {
            torque: zero,
            stiffen: true,
            home: true,
        },
        LeaderPhase::ReturnHome => LeaderCommand {
            torque: zero,
            stiffen: false,
            home: true,
        },
    };
    LeaderStepOutput {
        state: LeaderState { phase },
        command,
        homed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::pinv_transpose;
    use crate::model::joint_vector;
    use crate::scenario::READY_POSTURE;
    use nalgebra::UnitQuaternion;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gains() -> ControllerGains {
        ControllerGains::from_config(&GainsConfig::default()).unwrap()
    }

    fn random_q(chain: &KinematicChain, rng: &mut ChaCha8Rng) -> JointVector7 {
        JointVector7::from_fn(|i, _| rng.random_range(chain.lower()[i] + 0.05..chain.upper()[i] - 0.05))
    }

    #[test]
    fn beta_is_critical_damping() {
        let g = ControllerGains::new(JointVector7::zeros(), JointVector7::zeros(), 16.0).unwrap();
        assert_eq!(g.beta(), 8.0);
        assert!(ControllerGains::new(JointVector7::zeros(), JointVector7::zeros(), -1.0).is_err());
    }

    #[test]
    fn nullspace_examples() {
        let chain = KinematicChain::panda();
        let g = gains();
        let q = joint_vector(READY_POSTURE);
        let tau = nullspace_torque(&chain, &q, &JointVector7::zeros(), None, &g);
        assert_eq!(tau, JointVector7::zeros());

        let qdot = joint_vector([0.1, -0.2, 0.3, 0.0, 0.5, -0.1, 0.2]);
        let tau = nullspace_torque(&chain, &q, &qdot, None, &g);
        let n = nullspace_projector(&chain.jacobian(&q).unwrap());
        let expected = -(n * qdot) * g.beta();
        assert!((tau - expected).amax() < 1e-12);
    }

    #[test]
    fn nullspace_torque_exerts_no_task_force() {
        let chain = KinematicChain::panda();
        let g = gains();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let q = random_q(&chain, &mut rng);
            let qdot = JointVector7::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let q_ns = random_q(&chain, &mut rng);
            let tau = nullspace_torque(&chain, &q, &qdot, Some(&q_ns), &g);
            let f = pinv_transpose(&chain.jacobian(&q).unwrap()) * tau;
            assert!(f.norm() <= 1e-9 * tau.norm().max(1e-300), "{}", f.norm());
        }
    }

    fn wide_limits() -> JointVector7 {
        JointVector7::repeat(1e9)
    }

    #[test]
    fn leader_torque_branches() {
        let chain = KinematicChain::panda();
        let q = joint_vector(READY_POSTURE);
        let j = chain.jacobian(&q).unwrap();
        let tau_ns = joint_vector([0.1, 0.2, -0.3, 0.0, 0.1, 0.0, -0.2]);
        let tau_t = joint_vector([1.0, -1.0, 0.5, 0.0, 0.0, 0.2, 0.0]);
        let f_fra = Wrench6::from_array([1.0, 2.0, 3.0, 0.1, 0.2, 0.3]);
        let f_fmr = Wrench6::from_array([-2.0, 0.0, 0.0, 0.0, 0.0, 0.5]);
        let lim = wide_limits();

        let m = leader_torque(Phi::Manipulation, &tau_ns, &j, &f_fra, &f_fmr, &tau_t, &lim);
        let mut expected = tau_ns;
        for c in 0..7 {
            for r in 0..6 {
                expected[c] += j[(r, c)] * f_fra.to_vector()[r];
            }
        }
        assert!((m - expected).amax() < 1e-12);

        let n = leader_torque(Phi::Navigation, &tau_ns, &j, &f_fra, &Wrench6::zero(), &JointVector7::zeros(), &lim);
        assert_eq!(n, tau_ns);

        let n = leader_torque(Phi::Navigation, &tau_ns, &j, &f_fra, &f_fmr, &tau_t, &lim);
        let rest = n - tau_ns - tau_t;
        for c in 0..7 {
            let mut dot = 0.0;
            for r in 0..6 {
                dot += j[(r, c)] * f_fmr.to_vector()[r];
            }
            assert!((rest[c] - dot).abs() < 1e-9);
        }
    }

    proptest! {
        #[test]
        fn inactive_wrench_never_matters(
            a in prop::array::uniform6(-50.0f64..50.0),
            b in prop::array::uniform6(-50.0f64..50.0),
            c in prop::array::uniform6(-50.0f64..50.0),
        ) {
            let chain = KinematicChain::panda();
            let j = chain.jacobian(&joint_vector(READY_POSTURE)).unwrap();
            let lim = *chain.torque_limits();
            let z = JointVector7::zeros();
            let (wa, wb, wc) = (Wrench6::from_array(a), Wrench6::from_array(b), Wrench6::from_array(c));
            prop_assert_eq!(
                leader_torque(Phi::Manipulation, &z, &j, &wa, &wb, &z, &lim),
                leader_torque(Phi::Manipulation, &z, &j, &wa, &wc, &z, &lim)
            );
            prop_assert_eq!(
                leader_torque(Phi::Navigation, &z, &j, &wb, &wa, &z, &lim),
                leader_torque(Phi::Navigation, &z, &j, &wc, &wa, &z, &lim)
            );
        }

        #[test]
        fn saturation_keeps_sign(t in prop::array::uniform7(-500.0f64..500.0)) {
            let lim = KinematicChain::panda().torque_limits().clone_owned();
            let tau = joint_vector(t);
            let s = saturate(&tau, &lim);
            for i in 0..7 {
                prop_assert!(s[i].abs() <= lim[i]);
                prop_assert!(s[i] == 0.0 || s[i].signum() == tau[i].signum());
            }
        }
    }

    #[test]
    fn hold_examples() {
        let home = Isometry3::from_parts(
            Vector3::new(0.3, 0.0, 0.5).into(),
            UnitQuaternion::from_euler_angles(std::f64::consts::PI, 0.0, 0.0),
        );
        let g = HoldGains {
            stiffness: [0.0, 100.0, 100.0, 10.0, 10.0, 0.0],
            damping: [0.0; 6],
        };
        let z = Vector6::zeros();
        assert!(hold_wrench(&home, &home, &z, &g).is_zero());

        let mut along_x = home;
        along_x.translation.vector.x += 0.2;
        assert!(hold_wrench(&along_x, &home, &z, &g).is_zero());

        let mut along_y = home;
        along_y.translation.vector.y += 0.1;
        let w = hold_wrench(&along_y, &home, &z, &g).to_array();
        let expected = [0.0, -10.0, 0.0, 0.0, 0.0, 0.0];
        for i in 0..6 {
            assert!((w[i] - expected[i]).abs() < 1e-12);
        }

        let mut yawed = home;
        yawed.rotation = UnitQuaternion::from_euler_angles(0.0, 0.0, 0.3) * home.rotation;
        assert!(hold_wrench(&yawed, &home, &z, &g).to_vector().norm() < 1e-12);
    }

    #[test]
    fn mirror_examples() {
        let mut g = gains();
        g.kp = JointVector7::repeat(50.0);
        g.kd = JointVector7::repeat(5.0);
        let lim = wide_limits();
        let q = joint_vector(READY_POSTURE);
        let z = JointVector7::zeros();
        assert_eq!(follower_mirror_torque(&q, &q, &z, &g, &lim), z);

        let mut ql = q;
        ql[2] += 0.1;
        let tau = follower_mirror_torque(&ql, &q, &z, &g, &lim);
        for i in 0..7 {
            let expected = if i == 2 { 5.0 } else { 0.0 };
            assert!((tau[i] - expected).abs() < 1e-9);
        }

        let qd = JointVector7::repeat(1.0);
        assert_eq!(follower_mirror_torque(&q, &q, &qd, &g, &lim)[0], -5.0);
        g.paper_literal_damping = true;
        assert_eq!(follower_mirror_torque(&q, &q, &qd, &g, &lim)[0], 5.0);
    }

    #[test]
    fn mirror_step_response_converges() {
        let mut g = gains();
        g.kp = JointVector7::repeat(100.0);
        g.kd = JointVector7::repeat(20.0);
        let lim = wide_limits();
        let target = JointVector7::repeat(0.2);
        let mut q = JointVector7::zeros();
        let mut qd = JointVector7::zeros();
        let dt = 0.001;
        let mut errs = Vec::new();
        for _ in 0..3000 {
            let tau = follower_mirror_torque(&target, &q, &qd, &g, &lim);
            qd += tau * dt;
            q += qd * dt;
            errs.push((target - q).norm());
        }
        // critically damped: no overshoot, so the error never grows
        assert!(errs.windows(2).all(|w| w[1] <= w[0] + 1e-15));
        assert!(*errs.last().unwrap() < 1e-6);
    }

    fn pose_at(x: f64, yaw: f64) -> Pose6 {
        Pose6::new(Vector3::new(x, 0.0, 0.5), 0.0, 0.0, yaw)
    }

    #[test]
    fn velocity_mapping_examples() {
        let g = gains();
        let vb = VirtualBoundary::default();
        let home = pose_at(0.0, 0.0);
        let out = base_velocity_from_leader(&pose_at(0.04, 0.0), &home, &vb, &g, false);
        assert_eq!(out.velocity.v_x, 0.0);
        assert_eq!(out.status, BoundaryStatus::InsideDeadzone);

        let out = base_velocity_from_leader(&pose_at(0.35, 0.0), &home, &vb, &g, false);
        assert!((out.velocity.v_x - 0.5 * 0.35 / 0.35).abs() < 1e-9);
        let out = base_velocity_from_leader(&pose_at(0.35, 0.0), &home, &vb, &g, true);
        assert!((out.velocity.v_x - 0.2).abs() < 1e-9);

        let out = base_velocity_from_leader(&pose_at(0.0, 0.2), &home, &vb, &g, false);
        assert!((out.velocity.v_gamma + 0.2).abs() < 1e-9);

        let out = base_velocity_from_leader(&pose_at(0.45, 0.0), &home, &vb, &g, false);
        assert_eq!(out.velocity, BaseVelocity::ZERO);
        assert!(out.home_return);
        assert_eq!(out.status, BoundaryStatus::Beyond);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]
        #[test]
        fn velocity_mapping_is_odd_capped_and_dead_inside(d in -1.0f64..1.0, yaw in -3.0f64..3.0, near: bool) {
            let g = gains();
            let vb = VirtualBoundary::default();
            let a = base_velocity_from_offset(d, yaw, &vb, &g, near);
            let b = base_velocity_from_offset(-d, yaw, &vb, &g, near);
            prop_assert!(a.velocity.v_x.abs() <= 0.5);
            prop_assert_eq!(a.velocity.v_x, -b.velocity.v_x);
            if d.abs() < 0.05 {
                prop_assert_eq!(a.velocity.v_x, 0.0);
            }
            if d.abs() > 0.4 {
                prop_assert!(a.home_return && a.velocity.is_zero());
            }
        }
    }

    #[test]
    fn navigation_cue_examples() {
        let k = [20.0, 20.0, 20.0, 5.0, 5.0, 10.0];
        let p = Pose2D::new(1.0, 2.0, 0.7);
        assert!(navigation_cue(&p, &p, &k).is_zero());

        let base = Pose2D::new(0.0, 0.0, 0.0);
        let look = Pose2D::new(0.1, 0.0, 0.05);
        let w = navigation_cue(&base, &look, &k);
        assert!((w.force.x - 2.0).abs() < 1e-9);
        assert!((w.torque.z - 0.5).abs() < 1e-9);
        assert_eq!(w.force.y, 0.0);
        assert_eq!(w.force.z, 0.0);

        // heading-relative projection
        let base = Pose2D::new(1.0, 1.0, std::f64::consts::FRAC_PI_2);
        let look = Pose2D::new(1.0, 1.3, std::f64::consts::FRAC_PI_2);
        assert!((navigation_cue(&base, &look, &k).force.x - 6.0).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn cue_lateral_components_vanish(
            x in -5.0f64..5.0, y in -5.0f64..5.0, g in -3.0f64..3.0,
            lx in -5.0f64..5.0, ly in -5.0f64..5.0, lg in -3.0f64..3.0,
        ) {
            let k = [20.0, 20.0, 20.0, 5.0, 5.0, 10.0];
            let w = navigation_cue(&Pose2D::new(x, y, g), &Pose2D::new(lx, ly, lg), &k);
            prop_assert_eq!(w.force.y, 0.0);
            prop_assert_eq!(w.force.z, 0.0);
            prop_assert_eq!(w.torque.x, 0.0);
            prop_assert_eq!(w.torque.y, 0.0);
            // nonzero whenever the heading-axis or yaw error is
            let p = Pose2D::new(x, y, g);
            let (bx, _) = p.to_body(lx, ly);
            let dg = wrap_angle(lg - p.gamma);
            if bx.abs() > 1e-9 || dg.abs() > 1e-9 {
                prop_assert!(!w.is_zero());
            }
        }
    }

    #[test]
    fn cue_mapping_follows_kr_sign() {
        let w = Wrench6::from_array([1.0, 0.0, 0.0, 0.0, 0.0, 0.5]);
        assert_eq!(cue_to_leader_frame(&w, -1.0).torque.z, -0.5);
        assert_eq!(cue_to_leader_frame(&w, 2.0).torque.z, 0.5);
        assert_eq!(cue_to_leader_frame(&w, -1.0).force.x, 1.0);
    }

    #[test]
    fn leader_behavior_sequence() {
        let params = LeaderBehaviorParams {
            stiffen_ticks: 2,
            home_eps: 0.01,
        };
        let home = joint_vector(READY_POSTURE);
        let away = home + JointVector7::repeat(0.1);
        let tau = JointVector7::repeat(1.0);
        let s0 = LeaderState::default();

        let pass = leader_behavior_step(LeaderRequest::Continue, &s0, &away, &home, &tau, &params);
        assert_eq!(pass.command, LeaderCommand::torque(tau));

        let s1 = leader_behavior_step(LeaderRequest::SwitchHandshake, &s0, &away, &home, &tau, &params);
        assert!(s1.command.stiffen && !s1.command.home);
        let s2 = leader_behavior_step(LeaderRequest::Continue, &s1.state, &away, &home, &tau, &params);
        assert!(s2.command.stiffen && !s2.command.home);
        let s3 = leader_behavior_step(LeaderRequest::Continue, &s2.state, &away, &home, &tau, &params);
        assert!(s3.command.stiffen && s3.command.home);
        let s4 = leader_behavior_step(LeaderRequest::Continue, &s3.state, &home, &home, &tau, &params);
        assert!(s4.homed);
        assert!(!s4.command.stiffen && !s4.command.home);
        assert_eq!(s4.command.torque, tau);

        let r = leader_behavior_step(LeaderRequest::ReturnHome, &s0, &away, &home, &tau, &params);
        assert!(r.command.home && !r.command.stiffen);
    }
}
