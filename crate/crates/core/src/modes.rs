//! Navigation/manipulation state machine and the autonomous drop motion.

use nalgebra::{Isometry3, Translation3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control::Phi;
use crate::kinematics::{solve_ik, IkOptions, KinematicChain, KinematicsError};
use crate::model::{BaseVelocity, JointVector7};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlMode {
    Navigation,
    SwitchingToManipulation,
    Manipulation,
    PostGraspAuto,
    SwitchingToNavigation,
}

impl ControlMode {
    pub const ALL: [ControlMode; 5] = [
        ControlMode::Navigation,
        ControlMode::SwitchingToManipulation,
        ControlMode::Manipulation,
        ControlMode::PostGraspAuto,
        ControlMode::SwitchingToNavigation,
    ];

    pub fn phi(self) -> Phi {
        match self {
            ControlMode::Manipulation | ControlMode::PostGraspAuto => Phi::Manipulation,
            _ => Phi::Navigation,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ControlMode::Navigation => "navigation",
            ControlMode::SwitchingToManipulation => "switching_to_manipulation",
            ControlMode::Manipulation => "manipulation",
            ControlMode::PostGraspAuto => "post_grasp_auto",
            ControlMode::SwitchingToNavigation => "switching_to_navigation",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.as_str() == s)
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(c: u8) -> Option<Self> {
        Self::ALL.get(c as usize).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SwitchEventKind {
    GraspableDetected,
    LeaderHomed,
    Aligned,
    GraspConfirmed,
    DropKeyPressed,
    DropCompleted,
    ManualOverride,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SwitchEvent {
    pub kind: SwitchEventKind,
    pub tick: u64,
}

/// What the world looks like to the state machine this tick.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Observations {
    /// True on ticks where the planner and camera ran.
    pub planner_tick: bool,
    /// Marker seen and inside the graspable band.
    pub graspable: bool,
    pub object_attached: bool,
    /// max |q_leader - q_follower| (rad).
    pub alignment_error: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Notification {
    SwitchingToManipulation,
    ManipulationReady,
    DropStarted,
    SwitchingToNavigation,
    NavigationReady,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    /// Lock the leader, then home it.
    StiffenAndHome,
    /// Return the leader to torque mode.
    ReleaseLeader,
    /// Keep the leader locked while the follower moves on its own.
    HoldLeader,
    StartDrop,
    Notify(Notification),
    Warning(String),
    Transition {
        from: ControlMode,
        to: ControlMode,
        cause: &'static str,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ModeState {
    pub mode: ControlMode,
    pub confirm_count: u32,
    /// LeaderHomed seen since the current switch began.
    pub homed: bool,
    pub n_confirm: u32,
    pub align_eps: f64,
}

impl ModeState {
    pub fn new(n_confirm: u32, align_eps: f64) -> Self {
        Self {
            mode: ControlMode::Navigation,
            confirm_count: 0,
            homed: false,
            n_confirm,
            align_eps,
        }
    }

    pub fn phi(&self) -> Phi {
        self.mode.phi()
    }
}

fn enter(s: &mut ModeState, to: ControlMode, cause: &'static str, actions: &mut Vec<Action>) {
    actions.push(Action::Transition { from: s.mode, to, cause });
    s.mode = to;
    s.homed = false;
    s.confirm_count = 0;
}

/// Advances the state machine. Events are applied in tick order, then the
/// observation-driven transitions are checked.
pub fn fsm_step(state: &ModeState, obs: &Observations, events: &[SwitchEvent]) -> (ModeState, Vec<Action>) {
    let mut s = *state;
    let mut actions = Vec::new();
    let mut ordered = events.to_vec();
    ordered.sort_by_key(|e| e.tick);

    for ev in &ordered {
        use ControlMode as M;
        use SwitchEventKind as K;
        match (s.mode, ev.kind) {
            (M::Navigation, K::GraspableDetected) => {
                enter(&mut s, M::SwitchingToManipulation, "graspable", &mut actions);
                actions.push(Action::StiffenAndHome);
                actions.push(Action::Notify(Notification::SwitchingToManipulation));
            }
            (M::SwitchingToManipulation | M::SwitchingToNavigation, K::LeaderHomed) => s.homed = true,
            (M::SwitchingToManipulation, K::Aligned) if s.homed => {
                enter(&mut s, M::Manipulation, "aligned", &mut actions);
                actions.push(Action::ReleaseLeader);
                actions.push(Action::Notify(Notification::ManipulationReady));
            }
            (M::Manipulation, K::DropKeyPressed) => {
                if obs.object_attached {
                    enter(&mut s, M::PostGraspAuto, "drop key", &mut actions);
                    actions.push(Action::HoldLeader);
                    actions.push(Action::StartDrop);
                    actions.push(Action::Notify(Notification::DropStarted));
                } else {
                    actions.push(Action::Warning("drop key ignored: nothing is attached".into()));
                }
            }
            (_, K::DropKeyPressed) => {
                actions.push(Action::Warning(format!("drop key ignored in {}", s.mode.as_str())));
            }
            (M::PostGraspAuto, K::DropCompleted) => {
                enter(&mut s, M::SwitchingToNavigation, "drop completed", &mut actions);
                actions.push(Action::StiffenAndHome);
                actions.push(Action::Notify(Notification::SwitchingToNavigation));
            }
            (M::Navigation, K::ManualOverride) => {
                enter(&mut s, M::SwitchingToManipulation, "manual override", &mut actions);
                actions.push(Action::StiffenAndHome);
                actions.push(Action::Notify(Notification::SwitchingToManipulation));
            }
            (M::Manipulation, K::ManualOverride) => {
                enter(&mut s, M::SwitchingToNavigation, "manual override", &mut actions);
                actions.push(Action::StiffenAndHome);
                actions.push(Action::Notify(Notification::SwitchingToNavigation));
            }
            (_, K::ManualOverride) => {
                actions.push(Action::Warning(format!("override ignored in {}", s.mode.as_str())));
            }
            _ => {}
        }
    }

    match s.mode {
        ControlMode::Navigation if obs.planner_tick => {
            s.confirm_count = if obs.graspable { s.confirm_count + 1 } else { 0 };
            if s.confirm_count >= s.n_confirm {
                enter(&mut s, ControlMode::SwitchingToManipulation, "graspable", &mut actions);
                actions.push(Action::StiffenAndHome);
                actions.push(Action::Notify(Notification::SwitchingToManipulation));
            }
        }
        ControlMode::SwitchingToManipulation if s.homed && obs.alignment_error < s.align_eps => {
            enter(&mut s, ControlMode::Manipulation, "aligned", &mut actions);
            actions.push(Action::ReleaseLeader);
            actions.push(Action::Notify(Notification::ManipulationReady));
        }
        ControlMode::SwitchingToNavigation if s.homed => {
            enter(&mut s, ControlMode::Navigation, "leader homed", &mut actions);
            actions.push(Action::ReleaseLeader);
            actions.push(Action::Notify(Notification::NavigationReady));
        }
        _ => {}
    }
    (s, actions)
}

/// The base may only move in navigation mode.
pub fn gate_base_command(mode: ControlMode, cmd: BaseVelocity) -> BaseVelocity {
    if mode == ControlMode::Navigation {
        cmd
    } else {
        BaseVelocity::ZERO
    }
}

#[derive(Debug, Error)]
pub enum DropError {
    #[error("bin waypoint '{waypoint}' is unreachable: {source}")]
    Unreachable {
        waypoint: &'static str,
        #[source]
        source: KinematicsError,
    },
}

/// Rest-to-rest cubic between two joint vectors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CubicSegment {
    pub q0: JointVector7,
    pub q1: JointVector7,
    pub t0: f64,
    pub duration: f64,
}

impl CubicSegment {
    /// Position, velocity and acceleration at absolute time `t`.
    pub fn sample(&self, t: f64) -> (JointVector7, JointVector7, JointVector7) {
        let dq = self.q1 - self.q0;
        if self.duration <= 0.0 {
            return (self.q1, JointVector7::zeros(), JointVector7::zeros());
        }
        let s = ((t - self.t0) / self.duration).clamp(0.0, 1.0);
        if s == 0.0 {
            return (self.q0, JointVector7::zeros(), JointVector7::zeros());
        }
        if s == 1.0 {
            return (self.q1, JointVector7::zeros(), JointVector7::zeros());
        }
        let tt = self.duration;
        let pos = 3.0 * s * s - 2.0 * s * s * s;
        let vel = (6.0 * s - 6.0 * s * s) / tt;
        let acc = (6.0 - 12.0 * s) / (tt * tt);
        (self.q0 + dq * pos, dq * vel, dq * acc)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointTrajectory {
    pub segments: Vec<CubicSegment>,
    /// Time at which the gripper opens.
    pub release_time: f64,
    pub waypoints: Vec<JointVector7>,
}

impl JointTrajectory {
    pub fn duration(&self) -> f64 {
        self.segments.last().map(|s| s.t0 + s.duration).unwrap_or(0.0)
    }

    pub fn sample(&self, t: f64) -> (JointVector7, JointVector7, JointVector7) {
        let last = self.segments.last().expect("trajectory has segments");
        if t >= last.t0 + last.duration {
            return (last.q1, JointVector7::zeros(), JointVector7::zeros());
        }
        let seg = self
            .segments
            .iter()
            .find(|s| t < s.t0 + s.duration)
            .or(self.segments.last())
            .expect("trajectory has segments");
        seg.sample(t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DropParams {
    /// Bin position in the follower arm base frame.
    pub bin: Vector3<f64>,
    pub approach_height: f64,
    /// Release point height above the bin.
    pub release_height: f64,
    pub speed_scale: f64,
    pub dwell: f64,
}

fn segment_duration(a: &JointVector7, b: &JointVector7, vlim: &JointVector7, scale: f64) -> f64 {
    let mut t: f64 = 0.2;
    for i in 0..7 {
        // peak cubic speed is 1.5 * dq / T
        t = t.max(1.5 * (b[i] - a[i]).abs() / (scale * vlim[i]));
    }
    t
}

/// Joint trajectory from the current posture over the bin, down to the
/// release point, and back to `q_home`. Gripper orientation is kept at its
/// home orientation throughout.
pub fn plan_drop_trajectory(
    q_current: &JointVector7,
    q_home: &JointVector7,
    chain: &KinematicChain,
    p: &DropParams,
) -> Result<JointTrajectory, DropError> {
    let home_ee = chain.fk_unchecked(q_home);
    let at = |z: f64| Isometry3::from_parts(Translation3::from(p.bin + Vector3::new(0.0, 0.0, z)), home_ee.rotation);
    let opts = IkOptions::default();
    let pre = solve_ik(chain, &at(p.approach_height), q_home, &opts)
        .map_err(|source| DropError::Unreachable { waypoint: "pre-drop", source })?;
    let rel = solve_ik(chain, &at(p.release_height), &pre, &opts)
        .map_err(|source| DropError::Unreachable { waypoint: "release", source })?;
    let vlim = chain.velocity_limits();
    let legs = [
        (*q_current, pre, segment_duration(q_current, &pre, vlim, p.speed_scale)),
        (pre, rel, segment_duration(&pre, &rel, vlim, p.speed_scale)),
        (rel, rel, p.dwell),
        (rel, *q_home, segment_duration(&rel, q_home, vlim, p.speed_scale)),
    ];
    let mut segments = Vec::with_capacity(legs.len());
    let mut t = 0.0;
    for (q0, q1, duration) in legs {
        segments.push(CubicSegment { q0, q1, t0: t, duration });
        t += duration;
    }
    let release_time = segments[2].t0;
    Ok(JointTrajectory {
        segments,
        release_time,
        waypoints: vec![*q_current, pre, rel, *q_home],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::joint_vector;
    use crate::scenario::{ScenarioConfig, READY_POSTURE};
    use proptest::prelude::*;

    fn st() -> ModeState {
        ModeState::new(5, 0.01)
    }

    fn obs(graspable: bool) -> Observations {
        Observations {
            planner_tick: true,
            graspable,
            object_attached: false,
            alignment_error: 1.0,
        }
    }

    fn ev(kind: SwitchEventKind, tick: u64) -> SwitchEvent {
        SwitchEvent { kind, tick }
    }

    #[test]
    fn phi_follows_mode() {
        for m in ControlMode::ALL {
            let manip = matches!(m, ControlMode::Manipulation | ControlMode::PostGraspAuto);
            assert_eq!(m.phi() == Phi::Manipulation, manip);
            assert_eq!(ControlMode::from_code(m.code()), Some(m));
            assert_eq!(ControlMode::parse(m.as_str()), Some(m));
        }
    }

    #[test]
    fn switches_after_n_confirm_planner_ticks() {
        let mut s = st();
        for i in 0..4 {
            let (n, _) = fsm_step(&s, &obs(true), &[]);
            s = n;
            assert_eq!(s.mode, ControlMode::Navigation, "tick {i}");
        }
        // a miss resets the filter
        let (n, _) = fsm_step(&s, &obs(false), &[]);
        assert_eq!(n.confirm_count, 0);
        let mut s = st();
        let mut acts = vec![];
        for _ in 0..5 {
            let (n, a) = fsm_step(&s, &obs(true), &[]);
            s = n;
            acts = a;
        }
        assert_eq!(s.mode, ControlMode::SwitchingToManipulation);
        assert!(acts.contains(&Action::StiffenAndHome));
    }

    #[test]
    fn non_planner_ticks_do_not_count() {
        let mut s = st();
        let o = Observations {
            planner_tick: false,
            ..obs(true)
        };
        for _ in 0..100 {
            s = fsm_step(&s, &o, &[]).0;
        }
        assert_eq!(s.mode, ControlMode::Navigation);
    }

    #[test]
    fn homed_and_aligned_enter_manipulation() {
        let mut s = st();
        s.mode = ControlMode::SwitchingToManipulation;
        let o = Observations {
            alignment_error: 0.005,
            ..obs(false)
        };
        // aligned without homing is not enough
        assert_eq!(fsm_step(&s, &o, &[]).0.mode, ControlMode::SwitchingToManipulation);
        let (n, a) = fsm_step(&s, &o, &[ev(SwitchEventKind::LeaderHomed, 3)]);
        assert_eq!(n.mode, ControlMode::Manipulation);
        assert!(a.contains(&Action::ReleaseLeader));
    }

    #[test]
    fn drop_key_guard() {
        let mut s = st();
        s.mode = ControlMode::Manipulation;
        let (n, a) = fsm_step(&s, &obs(false), &[ev(SwitchEventKind::DropKeyPressed, 1)]);
        assert_eq!(n.mode, ControlMode::Manipulation);
        assert!(matches!(a[0], Action::Warning(_)));
        let o = Observations {
            object_attached: true,
            ..obs(false)
        };
        let (n, a) = fsm_step(&s, &o, &[ev(SwitchEventKind::DropKeyPressed, 1)]);
        assert_eq!(n.mode, ControlMode::PostGraspAuto);
        assert!(a.contains(&Action::StartDrop));

        let (n, _) = fsm_step(&n, &o, &[ev(SwitchEventKind::DropCompleted, 2)]);
        assert_eq!(n.mode, ControlMode::SwitchingToNavigation);
        let (n, _) = fsm_step(&n, &o, &[ev(SwitchEventKind::LeaderHomed, 3)]);
        assert_eq!(n.mode, ControlMode::Navigation);
    }

    #[test]
    fn manual_override_goes_through_handshake() {
        let (n, _) = fsm_step(&st(), &obs(false), &[ev(SwitchEventKind::ManualOverride, 0)]);
        assert_eq!(n.mode, ControlMode::SwitchingToManipulation);
        let mut m = st();
        m.mode = ControlMode::Manipulation;
        let (n, _) = fsm_step(&m, &obs(false), &[ev(SwitchEventKind::ManualOverride, 0)]);
        assert_eq!(n.mode, ControlMode::SwitchingToNavigation);
    }

    fn any_kind() -> impl Strategy<Value = SwitchEventKind> {
        prop_oneof![
            Just(SwitchEventKind::GraspableDetected),
            Just(SwitchEventKind::LeaderHomed),
            Just(SwitchEventKind::Aligned),
            Just(SwitchEventKind::GraspConfirmed),
            Just(SwitchEventKind::DropKeyPressed),
            Just(SwitchEventKind::DropCompleted),
            Just(SwitchEventKind::ManualOverride),
        ]
    }

    proptest! {
        #[test]
        fn manipulation_needs_homing_and_alignment(
            steps in prop::collection::vec(
                (prop::option::of(any_kind()), any::<bool>(), 0.0f64..0.02, any::<bool>()),
                1..80,
            )
        ) {
            let mut s = st();
            let mut homed_since_switch = false;
            for (i, (kind, graspable, align, attached)) in steps.into_iter().enumerate() {
                let events: Vec<SwitchEvent> = kind.iter().map(|k| ev(*k, i as u64)).collect();
                let o = Observations { planner_tick: true, graspable, object_attached: attached, alignment_error: align };
                let before = s.mode;
                if before == ControlMode::SwitchingToManipulation && kind == Some(SwitchEventKind::LeaderHomed) {
                    homed_since_switch = true;
                }
                let (n, actions) = fsm_step(&s, &o, &events);
                for a in &actions {
                    match a {
                        Action::Transition { to: ControlMode::SwitchingToManipulation, .. } => homed_since_switch = false,
                        Action::Transition { from, to: ControlMode::Manipulation, .. } => {
                            prop_assert_eq!(*from, ControlMode::SwitchingToManipulation);
                            prop_assert!(homed_since_switch);
                            prop_assert!(kind == Some(SwitchEventKind::Aligned) || align < 0.01);
                        }
                        _ => {}
                    }
                }
                s = n;
            }
        }
    }

    #[test]
    fn base_gate() {
        let cmd = BaseVelocity::new(0.3, 0.1);
        for m in ControlMode::ALL {
            let g = gate_base_command(m, cmd);
            if m == ControlMode::Navigation {
                assert_eq!(g, cmd);
            } else {
                assert_eq!(g, BaseVelocity::ZERO);
            }
        }
    }

    #[test]
    fn drop_trajectory_boundaries() {
        let chain = KinematicChain::panda();
        let cfg = ScenarioConfig::builtin_default();
        let home = joint_vector(READY_POSTURE);
        let mut current = home;
        current[0] += 0.2;
        current[3] += 0.15;
        let p = DropParams {
            bin: Vector3::new(cfg.bin.x_m, cfg.bin.y_m, cfg.bin.z_m),
            approach_height: cfg.bin.approach_height_m,
            release_height: 0.01,
            speed_scale: cfg.arms.drop_speed_scale,
            dwell: 0.3,
        };
        let traj = plan_drop_trajectory(&current, &home, &chain, &p).unwrap();
        let (q0, v0, _) = traj.sample(0.0);
        let (q1, v1, _) = traj.sample(traj.duration());
        assert_eq!(q0, current);
        assert_eq!(q1, home);
        assert_eq!(v0, JointVector7::zeros());
        assert_eq!(v1, JointVector7::zeros());

        let (qr, _, _) = traj.sample(traj.release_time);
        let ee = chain.fk_unchecked(&qr).translation.vector;
        assert!((ee.x - p.bin.x).hypot(ee.y - p.bin.y) < 1e-3);
        assert!(ee.z >= p.bin.z - 1e-3 && ee.z <= p.bin.z + 0.02);

        // speed stays within the scaled limits
        let vlim = chain.velocity_limits();
        let mut t = 0.0;
        while t < traj.duration() {
            let (_, v, _) = traj.sample(t);
            for i in 0..7 {
                assert!(v[i].abs() <= p.speed_scale * vlim[i] + 1e-9);
            }
            t += 0.01;
        }
    }
}
