//! The closed control loop. One `Session` owns a world, the planners, the
//! mode machine and the leader/follower controllers, and advances them one
//! tick per operator input. Trials, replays and the bridge all drive it.

use std::sync::Arc;

use nalgebra::{Isometry3, Vector3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::control::{
    base_velocity_from_leader, cue_to_leader_frame, follower_mirror_torque, hold_torque, leader_behavior_step,
    leader_torque, manipulation_cue, navigation_cue, nullspace_torque_with_jacobian, saturate, BoundaryStatus,
    ControlError, ControllerGains, HoldGains, LeaderBehaviorParams, LeaderPhase, LeaderRequest, LeaderState,
    VirtualBoundary,
};
use crate::grid::Cell;
use crate::harness::operator::{OperatorInput, OperatorSource, OperatorView};
use crate::model::{max_abs_diff, BaseVelocity, JointVector7, Pose2D, Pose6, Wrench6};
use crate::modes::{
    fsm_step, gate_base_command, plan_drop_trajectory, Action, ControlMode, DropError, DropParams, JointTrajectory,
    ModeState, Observations, SwitchEvent, SwitchEventKind,
};
use crate::planning::{grasp_goal, BaseState, DwaParams, NavigationAssist, PlanError};
use crate::scenario::{NullspaceTarget, Scenario};
use crate::sim::{graspable, ObjectState, SimError, StepInput, World};
use crate::vehicle::Bicycle;

/// Height above the bin at which the gripper opens.
pub const RELEASE_HEIGHT_M: f64 = 0.05;

#[derive(Debug, Error)]
pub enum SessionError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("initial route: {0}")]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Gains(#[from] ControlError),
    #[error("drop trajectory: {0}")]
    Drop(#[from] DropError),
}

/// Experimental condition of a trial.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    /// Cues rendered on the leader.
    Cues,
    /// Cues computed and logged but never rendered.
    NoCues,
    /// Cues rendered, operator periodically distracted.
    DistractedCues,
}

impl Condition {
    pub const ALL: [Condition; 3] = [Condition::Cues, Condition::NoCues, Condition::DistractedCues];

    pub fn number(self) -> u8 {
        match self {
            Condition::Cues => 1,
            Condition::NoCues => 2,
            Condition::DistractedCues => 3,
        }
    }

    pub fn from_number(n: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.number() == n)
    }

    pub fn cues_rendered(self) -> bool {
        self != Condition::NoCues
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    /// Object dropped and the system back in navigation.
    Completed,
    Timeout,
    Collision,
}

/// Human-readable event for logs and summaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoggedEvent {
    pub tick: u64,
    pub kind: String,
    pub detail: String,
}

/// Everything logged for one tick. The inputs are the operator's raw input;
/// the rest is state after the tick.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TickRow {
    pub tick: u64,
    pub time: f64,
    pub mode: ControlMode,
    pub input: OperatorInput,
    /// Leader end-effector pose (x, y, z, roll, pitch, yaw) before the step.
    pub leader_pose: [f64; 6],
    pub cue: Wrench6,
    pub base_cmd: BaseVelocity,
    pub boundary: BoundaryStatus,
    pub stiffen: bool,
    pub home: bool,
    /// Lookahead pose of the latest local plan.
    pub lookahead: Option<Pose2D>,
    pub base: Pose2D,
    pub follower_q: JointVector7,
    pub object_state: ObjectState,
    pub collisions: u32,
}

impl TickRow {
    pub fn hash_into(&self, h: &mut Sha256) {
        let mut f = |v: f64| h.update(v.to_bits().to_le_bytes());
        f(self.time);
        self.input.wrench.to_array().into_iter().for_each(&mut f);
        self.leader_pose.into_iter().for_each(&mut f);
        self.cue.to_array().into_iter().for_each(&mut f);
        f(self.base_cmd.v_x);
        f(self.base_cmd.v_gamma);
        let la = self.lookahead.map(|p| [p.x, p.y, p.gamma]).unwrap_or([f64::NAN; 3]);
        la.into_iter().for_each(&mut f);
        [self.base.x, self.base.y, self.base.gamma].into_iter().for_each(&mut f);
        self.follower_q.iter().copied().for_each(&mut f);
        h.update(self.tick.to_le_bytes());
        h.update([
            self.mode.code(),
            self.input.keys(),
            boundary_code(self.boundary),
            self.stiffen as u8 | (self.home as u8) << 1,
            object_code(self.object_state),
        ]);
        h.update(self.collisions.to_le_bytes());
    }
}

pub fn boundary_code(b: BoundaryStatus) -> u8 {
    match b {
        BoundaryStatus::InsideDeadzone => 0,
        BoundaryStatus::Active => 1,
        BoundaryStatus::Beyond => 2,
    }
}

pub fn boundary_from_code(c: u8) -> Option<BoundaryStatus> {
    match c {
        0 => Some(BoundaryStatus::InsideDeadzone),
        1 => Some(BoundaryStatus::Active),
        2 => Some(BoundaryStatus::Beyond),
        _ => None,
    }
}

pub fn object_code(o: ObjectState) -> u8 {
    match o {
        ObjectState::Free => 0,
        ObjectState::Attached => 1,
        ObjectState::InBin => 2,
    }
}

pub fn object_from_code(c: u8) -> Option<ObjectState> {
    match c {
        0 => Some(ObjectState::Free),
        1 => Some(ObjectState::Attached),
        2 => Some(ObjectState::InBin),
        _ => None,
    }
}

#[derive(Debug, Clone)]
struct DropRun {
    traj: JointTrajectory,
    t0: f64,
    released: bool,
    done: bool,
}

/// Phase boundaries, in seconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimes {
    pub nav_end: Option<f64>,
    pub manip_time: f64,
    pub end: Option<f64>,
}

pub struct Session {
    scenario: Arc<Scenario>,
    condition: Condition,
    world: World,
    assist: NavigationAssist,
    modes: ModeState,
    leader: LeaderState,
    gains: ControllerGains,
    hold: HoldGains,
    vb: VirtualBoundary,
    leader_params: LeaderBehaviorParams,
    drop_params: DropParams,
    home_ee: Isometry3<f64>,
    home_pose: Pose6,
    goal: Pose2D,
    pending: Vec<SwitchEvent>,
    request: LeaderRequest,
    marker: Option<Vector3<f64>>,
    seen: Option<Vector3<f64>>,
    discovered: Vec<Cell>,
    graspable_now: bool,
    obstacle_near: bool,
    drop: Option<DropRun>,
    cue: Wrench6,
    inhibited: bool,
    manip_entered: Option<f64>,
    drop_finished: bool,
    times: PhaseTimes,
    nav_track: Vec<(f64, f64)>,
    nav_reference: Option<Vec<Pose2D>>,
    events: Vec<LoggedEvent>,
    outcome: Option<Outcome>,
    hasher: Sha256,
}

impl Session {
    pub fn new(scenario: &Scenario, condition: Condition, seed: u64) -> Result<Self, SessionError> {
        let cfg = &scenario.config;
        let world = World::new(scenario, seed);
        let dwa = DwaParams::from_config(&cfg.planner, Bicycle::from_config(&cfg.vehicle));
        // route on the prior map, then let the first scan reveal what it saw
        let mut assist = NavigationAssist::new(&scenario.grid, cfg, dwa, cfg.start.pose())?;
        let seen: Vec<_> = world.state().grid.discovered_cells().collect();
        assist.observe(&world.state().grid, &seen, &cfg.start.pose());
        let start = BaseState {
            pose: world.state().base,
            velocity: BaseVelocity::ZERO,
        };
        assist.plan(&world.state().grid, &start);
        let home_ee = scenario.chain.fk_unchecked(&cfg.leader_home());
        let stiffen_ticks = (cfg.switching.stiffen_s / cfg.sim.dt_s).round() as u32;
        let mut s = Self {
            condition,
            assist,
            modes: ModeState::new(cfg.switching.n_confirm, cfg.switching.align_eps_rad),
            leader: LeaderState::default(),
            gains: ControllerGains::from_config(&cfg.gains)?,
            hold: HoldGains::from_config(&cfg.gains),
            vb: VirtualBoundary::from_config(&cfg.virtual_boundary)?,
            leader_params: LeaderBehaviorParams {
                stiffen_ticks,
                home_eps: cfg.switching.home_eps_rad,
            },
            drop_params: DropParams {
                bin: Vector3::new(cfg.bin.x_m, cfg.bin.y_m, cfg.bin.z_m),
                approach_height: cfg.bin.approach_height_m,
                release_height: RELEASE_HEIGHT_M,
                speed_scale: cfg.arms.drop_speed_scale,
                dwell: cfg.switching.release_dwell_s,
            },
            home_pose: Pose6::from_isometry(&home_ee),
            home_ee,
            goal: grasp_goal(cfg),
            pending: Vec::new(),
            request: LeaderRequest::Continue,
            marker: None,
            seen: None,
            discovered: seen,
            graspable_now: false,
            obstacle_near: false,
            drop: None,
            cue: Wrench6::zero(),
            inhibited: false,
            manip_entered: None,
            drop_finished: false,
            times: PhaseTimes::default(),
            nav_track: vec![(world.state().base.x, world.state().base.y)],
            nav_reference: None,
            events: Vec::new(),
            outcome: None,
            hasher: Sha256::new(),
            world,
            scenario: Arc::new(scenario.clone()),
        };
        s.hasher.update(s.scenario.hash().as_bytes());
        s.hasher.update([condition.number()]);
        s.hasher.update(seed.to_le_bytes());
        Ok(s)
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn condition(&self) -> Condition {
        self.condition
    }

    pub fn world(&self) -> &World {
        &self.world
    }

    pub fn assist(&self) -> &NavigationAssist {
        &self.assist
    }

    pub fn mode(&self) -> ControlMode {
        self.modes.mode
    }

    pub fn leader_phase(&self) -> LeaderPhase {
        self.leader.phase
    }

    pub fn events(&self) -> &[LoggedEvent] {
        &self.events
    }

    pub fn outcome(&self) -> Option<Outcome> {
        self.outcome
    }

    pub fn times(&self) -> PhaseTimes {
        self.times
    }

    pub fn goal(&self) -> Pose2D {
        self.goal
    }

    /// Base positions driven while in navigation, up to the first switch.
    pub fn nav_track(&self) -> &[(f64, f64)] {
        &self.nav_track
    }

    /// Planner reference for the navigation phase: frozen at the first switch.
    pub fn nav_reference(&self) -> Vec<Pose2D> {
        self.nav_reference.clone().unwrap_or_else(|| self.assist.reference())
    }

    /// Running hash over every tick so far.
    pub fn record_hash(&self) -> String {
        crate::scenario::hex_digest(&self.hasher.clone().finalize())
    }

    pub fn is_finished(&self) -> bool {
        self.outcome.is_some()
    }

    pub fn cue(&self) -> Wrench6 {
        self.cue
    }

    /// Marker detection of the latest camera frame, in the arm base frame.
    pub fn marker_seen(&self) -> Option<Vector3<f64>> {
        self.seen
    }

    /// Every cell the lidar has revealed, in discovery order.
    pub fn discovered(&self) -> &[Cell] {
        &self.discovered
    }

    pub fn obstacle_near(&self) -> bool {
        self.obstacle_near
    }

    /// What the operator sees before choosing the input for the next tick.
    pub fn view(&self) -> OperatorView<'_> {
        let st = self.world.state();
        let chain = self.world.chain();
        let (ee, j) = chain.fk_and_jacobian(&st.leader_q);
        let cfg = &self.scenario.config;
        OperatorView {
            tick: st.tick,
            time: st.time,
            dt: cfg.sim.dt_s,
            mode: self.modes.mode,
            leader_ee: ee,
            leader_twist: j * st.leader_qd,
            leader_home: self.home_ee,
            inhibited: self.inhibited,
            cue: self.cue,
            base: st.base,
            base_velocity: st.base_velocity,
            kv: if self.obstacle_near { cfg.gains.kv_obstacle } else { cfg.gains.kv_free },
            kr: cfg.gains.kr,
            boundary: self.vb,
            object_in_arm: self.world.object_in_arm(),
            follower_ee: self.world.follower_ee().translation.vector,
            object_state: st.object_state,
            grid: &st.grid,
            goal: self.goal,
        }
    }

    fn log(&mut self, tick: u64, kind: &str, detail: String) {
        log::debug!("tick {tick}: {kind} {detail}");
        self.events.push(LoggedEvent {
            tick,
            kind: kind.to_string(),
            detail,
        });
    }

    /// Advances one tick with the given operator input.
    pub fn step(&mut self, input: &OperatorInput) -> Result<TickRow, SessionError> {
        let sc = Arc::clone(&self.scenario);
        let cfg = &sc.config;
        let tick = self.world.state().tick;
        let time = self.world.state().time;
        let planner_tick = tick % cfg.planner.period_ticks as u64 == 0;

        let (lq, lqd) = (self.world.state().leader_q, self.world.state().leader_qd);
        let (ee_l, j) = self.world.chain().fk_and_jacobian(&lq);
        let twist = j * lqd;
        let leader_pose = Pose6::from_isometry(&ee_l);

        if planner_tick {
            let seen = self.world.marker_visible();
            if seen.is_some() {
                self.marker = seen;
            }
            self.seen = seen;
            self.graspable_now = seen.is_some_and(|m| graspable(&m, &cfg.switching));
            if self.modes.mode == ControlMode::Navigation {
                let st = self.world.state();
                let bs = BaseState {
                    pose: st.base,
                    velocity: st.base_velocity,
                };
                self.obstacle_near = self.assist.obstacle_near(&st.grid, &st.base);
                let grid = st.grid.clone();
                self.assist.plan(&grid, &bs);
            }
        }

        // mode machine
        let mut events = std::mem::take(&mut self.pending);
        if input.drop_key {
            events.push(SwitchEvent {
                kind: SwitchEventKind::DropKeyPressed,
                tick,
            });
        }
        if input.override_key {
            events.push(SwitchEvent {
                kind: SwitchEventKind::ManualOverride,
                tick,
            });
        }
        let obs = Observations {
            planner_tick,
            graspable: self.graspable_now,
            object_attached: self.world.state().object_state == ObjectState::Attached,
            alignment_error: max_abs_diff(&lq, &self.world.state().follower_q),
        };
        let (next, actions) = fsm_step(&self.modes, &obs, &events);
        self.modes = next;
        for a in actions {
            match a {
                Action::StiffenAndHome => self.request = LeaderRequest::SwitchHandshake,
                Action::ReleaseLeader => self.request = LeaderRequest::Release,
                Action::HoldLeader => self.request = LeaderRequest::Hold,
                Action::StartDrop => {
                    let traj = plan_drop_trajectory(
                        &self.world.state().follower_q,
                        &cfg.follower_home(),
                        self.world.chain(),
                        &self.drop_params,
                    )?;
                    self.drop = Some(DropRun {
                        traj,
                        t0: time,
                        released: false,
                        done: false,
                    });
                }
                Action::Notify(n) => self.log(tick, "notify", format!("{n:?}")),
                Action::Warning(w) => {
                    log::warn!("tick {tick}: {w}");
                    self.log(tick, "warning", w);
                }
                Action::Transition { from, to, cause } => self.on_transition(tick, time, from, to, cause),
            }
        }
        let mode = self.modes.mode;

        // base command
        let bv = base_velocity_from_leader(&leader_pose, &self.home_pose, &self.vb, &self.gains, self.obstacle_near);
        if mode == ControlMode::Navigation
            && bv.home_return
            && self.leader.phase == LeaderPhase::Normal
            && self.request == LeaderRequest::Continue
        {
            self.request = LeaderRequest::ReturnHome;
            self.log(tick, "boundary", "leader beyond the outer boundary; returning home".into());
        }
        let homing = self.leader.phase == LeaderPhase::ReturnHome || self.request == LeaderRequest::ReturnHome;
        let base_cmd = gate_base_command(mode, if homing { BaseVelocity::ZERO } else { bv.velocity });

        // cues
        let follower_ee = self.world.follower_ee().translation.vector;
        let mut lookahead = None;
        let (mut f_fmr, mut f_fra) = (Wrench6::zero(), Wrench6::zero());
        if mode == ControlMode::Navigation {
            lookahead = self.assist.lookahead();
            if let Some(la) = lookahead {
                let body = navigation_cue(&self.world.state().base, &la, &cfg.gains.k_fmr_diag);
                f_fmr = cue_to_leader_frame(&body, cfg.gains.kr);
            }
        } else if mode == ControlMode::Manipulation && self.world.state().object_state == ObjectState::Free {
            if let Some(m) = self.marker {
                f_fra = manipulation_cue(&m, &follower_ee, &cfg.gains.k_fra_diag);
            }
        }
        if !self.condition.cues_rendered() {
            f_fmr = Wrench6::zero();
            f_fra = Wrench6::zero();
        }
        let cue = f_fmr + f_fra;

        // leader torque and lock/home behavior
        let q_ns = match cfg.gains.nullspace_target {
            NullspaceTarget::Current => lq,
            NullspaceTarget::Home => cfg.leader_home(),
        };
        let limits = *self.world.chain().torque_limits();
        let tau_ns = nullspace_torque_with_jacobian(&j, &lq, &lqd, &q_ns, &self.gains);
        let phi = mode.phi();
        let tau_t = hold_torque(&ee_l, &self.home_ee, &twist, &j, &self.hold);
        let tau = leader_torque(phi, &tau_ns, &j, &f_fra, &f_fmr, &tau_t, &limits);
        let lb = leader_behavior_step(
            std::mem::replace(&mut self.request, LeaderRequest::Continue),
            &self.leader,
            &lq,
            &cfg.leader_home(),
            &tau,
            &self.leader_params,
        );
        self.leader = lb.state;
        if lb.homed {
            self.pending.push(SwitchEvent {
                kind: SwitchEventKind::LeaderHomed,
                tick: tick + 1,
            });
        }
        self.inhibited = lb.command.stiffen || lb.command.home;

        // follower
        let (fq, fqd) = (self.world.state().follower_q, self.world.state().follower_qd);
        let mut release = false;
        let follower_torque = match mode {
            ControlMode::Manipulation => follower_mirror_torque(&lq, &fq, &fqd, &self.gains, &limits),
            ControlMode::PostGraspAuto => match self.drop.as_mut() {
                Some(d) => {
                    let t = time - d.t0;
                    let (q_ref, qd_ref, _) = d.traj.sample(t);
                    if !d.released && t >= d.traj.release_time {
                        d.released = true;
                        release = true;
                    }
                    if !d.done
                        && t >= d.traj.duration()
                        && max_abs_diff(&fq, &cfg.follower_home()) < cfg.switching.home_eps_rad
                    {
                        d.done = true;
                        self.pending.push(SwitchEvent {
                            kind: SwitchEventKind::DropCompleted,
                            tick: tick + 1,
                        });
                    }
                    let kd = self.gains.kd;
                    let tau = (q_ref - fq).component_mul(&self.gains.kp) + (qd_ref - fqd).component_mul(&kd);
                    saturate(&tau, &limits)
                }
                None => follower_mirror_torque(&cfg.follower_home(), &fq, &fqd, &self.gains, &limits),
            },
            _ => follower_mirror_torque(&cfg.follower_home(), &fq, &fqd, &self.gains, &limits),
        };

        let operator_wrench = if self.inhibited { Wrench6::zero() } else { input.wrench };
        let out = self.world.step(&StepInput {
            mode,
            leader: lb.command,
            operator_wrench,
            base_cmd,
            follower_torque,
            grasp: input.grasp_key,
            release,
        })?;
        if out.grasped {
            self.log(tick, "grasp", "object attached".into());
            self.pending.push(SwitchEvent {
                kind: SwitchEventKind::GraspConfirmed,
                tick: tick + 1,
            });
        } else if input.grasp_key {
            self.log(tick, "grasp", "attempt missed".into());
        }
        if out.released {
            let where_ = self.world.state().object_state.as_str();
            self.log(tick, "release", format!("object {where_}"));
        }
        if !out.discovered.is_empty() {
            self.discovered.extend_from_slice(&out.discovered);
            let st = self.world.state();
            let (grid, base) = (st.grid.clone(), st.base);
            let before = self.assist.replans();
            self.assist.observe(&grid, &out.discovered, &base);
            if self.assist.replans() > before {
                self.log(tick, "replan", format!("{} new cells", out.discovered.len()));
            }
        }
        if out.collision_started {
            log::warn!("tick {tick}: base collision");
            self.log(tick, "collision", "base footprint touched an obstacle".into());
            if cfg.sim.abort_on_collision {
                self.finish(Outcome::Collision);
            }
        }

        let st = self.world.state();
        if self.times.nav_end.is_none() && mode == ControlMode::Navigation {
            let last = self.nav_track[self.nav_track.len() - 1];
            if (st.base.x - last.0).hypot(st.base.y - last.1) >= 1e-3 {
                self.nav_track.push((st.base.x, st.base.y));
            }
        }

        let row = TickRow {
            tick,
            time,
            mode,
            input: *input,
            leader_pose: [
                leader_pose.x(),
                leader_pose.y(),
                leader_pose.z(),
                leader_pose.rpy[0],
                leader_pose.rpy[1],
                leader_pose.yaw(),
            ],
            cue,
            base_cmd,
            boundary: bv.status,
            stiffen: lb.command.stiffen,
            home: lb.command.home,
            lookahead,
            base: st.base,
            follower_q: st.follower_q,
            object_state: st.object_state,
            collisions: st.collisions,
        };
        row.hash_into(&mut self.hasher);
        self.cue = cue;

        if self.outcome.is_none() && st.time >= cfg.sim.timeout_s - 1e-9 {
            self.finish(Outcome::Timeout);
        }
        Ok(row)
    }

    fn on_transition(&mut self, tick: u64, time: f64, from: ControlMode, to: ControlMode, cause: &str) {
        self.log(tick, "transition", format!("{} -> {} ({cause})", from.as_str(), to.as_str()));
        if from == ControlMode::Navigation && self.times.nav_end.is_none() {
            self.times.nav_end = Some(time);
            self.nav_reference = Some(self.assist.reference());
        }
        if to == ControlMode::Manipulation {
            self.manip_entered = Some(time);
        }
        if from == ControlMode::Manipulation {
            if let Some(t0) = self.manip_entered.take() {
                self.times.manip_time += time - t0;
            }
        }
        if from == ControlMode::PostGraspAuto {
            self.drop_finished = true;
            self.drop = None;
        }
        if to == ControlMode::Navigation && self.drop_finished {
            self.finish(Outcome::Completed);
        }
    }

    fn finish(&mut self, outcome: Outcome) {
        if self.outcome.is_some() {
            return;
        }
        let t = self.world.state().time;
        if let Some(t0) = self.manip_entered.take() {
            self.times.manip_time += t - t0;
        }
        self.times.end = Some(t);
        self.outcome = Some(outcome);
        self.log(self.world.state().tick, "end", format!("{outcome:?}"));
    }

    /// Runs until the trial ends, calling `sink` with every row.
    pub fn run<O: OperatorSource + ?Sized>(
        &mut self,
        operator: &mut O,
        mut sink: impl FnMut(&TickRow),
    ) -> Result<Outcome, SessionError> {
        while self.outcome.is_none() {
            let input = operator.input(&self.view());
            let row = self.step(&input)?;
            sink(&row);
        }
        Ok(self.outcome.expect("loop exits on outcome"))
    }
}
