//! Scripted operators driving the leader arm, and the interface any operator
//! (scripted, replayed or remote) implements.

use nalgebra::{Isometry3, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::control::VirtualBoundary;
use crate::grid::{Cell, DistanceField, OccupancyGrid};
use crate::kinematics::rotation_error;
use crate::model::{wrap_angle, BaseVelocity, Pose2D, Pose6, Wrench6};
use crate::modes::ControlMode;
use crate::planning::global::{bresenham, plan_cells, GlobalPath, GridView};
use crate::scenario::{OperatorConfig, ScenarioConfig};
use crate::sim::ObjectState;

/// Keyboard and haptic input for one tick.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct OperatorInput {
    pub wrench: Wrench6,
    pub grasp_key: bool,
    pub drop_key: bool,
    pub override_key: bool,
}

impl OperatorInput {
    pub fn keys(&self) -> u8 {
        self.grasp_key as u8 | (self.drop_key as u8) << 1 | (self.override_key as u8) << 2
    }

    pub fn with_keys(wrench: Wrench6, keys: u8) -> Self {
        Self {
            wrench,
            grasp_key: keys & 1 != 0,
            drop_key: keys & 2 != 0,
            override_key: keys & 4 != 0,
        }
    }
}

/// What an operator perceives before choosing its input for a tick.
#[derive(Debug, Clone, Copy)]
pub struct OperatorView<'a> {
    pub tick: u64,
    pub time: f64,
    pub dt: f64,
    pub mode: ControlMode,
    /// Leader end-effector pose and twist in the leader base frame.
    pub leader_ee: Isometry3<f64>,
    pub leader_twist: Vector6<f64>,
    pub leader_home: Isometry3<f64>,
    /// Leader is locked or homing; input has no effect.
    pub inhibited: bool,
    /// Cue wrench rendered on the leader this tick.
    pub cue: Wrench6,
    pub base: Pose2D,
    pub base_velocity: BaseVelocity,
    /// Speed gain currently applied to the driving axis.
    pub kv: f64,
    pub kr: f64,
    pub boundary: VirtualBoundary,
    /// Object and gripper positions in the follower arm base frame.
    pub object_in_arm: Vector3<f64>,
    pub follower_ee: Vector3<f64>,
    pub object_state: ObjectState,
    pub grid: &'a OccupancyGrid,
    pub goal: Pose2D,
}

pub trait OperatorSource {
    fn input(&mut self, view: &OperatorView) -> OperatorInput;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatorKind {
    /// Follows its own plan and yields to the cues.
    Compliant,
    /// Same, but does not yield to cues.
    Ignoring,
    /// Compliant, with periodic spells where it lets go of the leader.
    Distracted,
}

impl OperatorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OperatorKind::Compliant => "compliant",
            OperatorKind::Ignoring => "ignoring",
            OperatorKind::Distracted => "distracted",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [OperatorKind::Compliant, OperatorKind::Ignoring, OperatorKind::Distracted]
            .into_iter()
            .find(|k| k.as_str() == s)
    }
}

/// Plays back a recorded input stream; zero input once it runs out.
#[derive(Debug, Clone)]
pub struct ReplayOperator {
    inputs: Vec<OperatorInput>,
    next: usize,
}

impl ReplayOperator {
    pub fn new(inputs: Vec<OperatorInput>) -> Self {
        Self { inputs, next: 0 }
    }
}

impl OperatorSource for ReplayOperator {
    fn input(&mut self, _view: &OperatorView) -> OperatorInput {
        let i = self.inputs.get(self.next).copied().unwrap_or_default();
        self.next += 1;
        i
    }
}

/// Leader offset that stays clear of the outer boundary.
const MAX_DRIVE_OFFSET_FRACTION: f64 = 0.85;
const MAX_YAW_OFFSET_RAD: f64 = 0.6;
const BOUNDARY_GUARD_N_PER_M: f64 = 2000.0;

/// The operator's intended path: its own route with a smooth lateral wander.
#[derive(Debug, Clone)]
struct Intent {
    points: Vec<(f64, f64)>,
    /// Cumulative arc length at each point.
    arc: Vec<f64>,
    cursor: usize,
}

impl Intent {
    fn length(&self) -> f64 {
        self.arc.last().copied().unwrap_or(0.0)
    }

    fn advance_cursor(&mut self, x: f64, y: f64) {
        let d = |i: usize, p: &[(f64, f64)]| (p[i].0 - x).powi(2) + (p[i].1 - y).powi(2);
        let lo = self.cursor.saturating_sub(20);
        let hi = (self.cursor + 60).min(self.points.len());
        let mut best = self.cursor;
        for i in lo..hi {
            if d(i, &self.points) < d(best, &self.points) {
                best = i;
            }
        }
        self.cursor = best;
    }

    fn point_at(&self, s: f64) -> (f64, f64) {
        let i = self.arc.partition_point(|a| *a < s);
        if i == 0 {
            return self.points[0];
        }
        if i >= self.points.len() {
            // continue straight past the end along the last segment
            let n = self.points.len();
            let end = self.points[n - 1];
            if n < 2 {
                return end;
            }
            let prev = self.points[n - 2];
            let seg = (end.0 - prev.0).hypot(end.1 - prev.1).max(1e-9);
            let extra = s - self.arc[n - 1];
            return (end.0 + extra * (end.0 - prev.0) / seg, end.1 + extra * (end.1 - prev.1) / seg);
        }
        let (a, b) = (self.points[i - 1], self.points[i]);
        let span = self.arc[i] - self.arc[i - 1];
        let t = if span > 0.0 { (s - self.arc[i - 1]) / span } else { 0.0 };
        (a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1))
    }
}

#[derive(Debug, Clone)]
pub struct ScriptedOperator {
    kind: OperatorKind,
    cfg: OperatorConfig,
    rng: ChaCha8Rng,
    /// Ornstein-Uhlenbeck hand tremor, per wrench axis.
    noise: [f64; 6],
    distraction: Vec<(f64, f64)>,
    perceived: Vec<bool>,
    field: Option<DistanceField>,
    footprint: f64,
    inflation_cap: f64,
    approach_distance: f64,
    standoff: f64,
    intent: Option<Intent>,
    /// Direction of the initial error in the object position estimate.
    bias_dir: Vector3<f64>,
    manip_since: Option<f64>,
    attached_since: Option<f64>,
    last_grasp: f64,
    last_drop: f64,
    pub replans: u32,
}

impl ScriptedOperator {
    pub fn new(kind: OperatorKind, scenario: &ScenarioConfig, seed: u64) -> Self {
        let cfg = scenario.operator.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0be7_a70f_0000_0002);
        let mut bias_dir = Vector3::zeros();
        while bias_dir.norm() < 1e-3 {
            bias_dir = Vector3::new(
                StandardNormal.sample(&mut rng),
                StandardNormal.sample(&mut rng),
                StandardNormal.sample(&mut rng),
            );
        }
        let bias_dir = bias_dir.normalize();
        // drawn for every kind so the tremor stream stays paired across kinds
        let mut distraction = Vec::new();
        let [lo, hi] = cfg.distraction_gap_s;
        let mut t = rng.random_range(lo..=hi);
        while t < scenario.sim.timeout_s {
            distraction.push((t, t + cfg.distraction_s));
            t += rng.random_range(lo..=hi);
        }
        if kind != OperatorKind::Distracted {
            distraction.clear();
        }
        Self {
            kind,
            footprint: scenario.planner.footprint_radius_m,
            inflation_cap: cfg.inflation_m + scenario.planner.footprint_radius_m + 0.2,
            approach_distance: scenario.planner.approach_distance_m,
            standoff: scenario.planner.standoff_m,
            cfg,
            rng,
            noise: [0.0; 6],
            distraction,
            perceived: Vec::new(),
            field: None,
            intent: None,
            bias_dir,
            manip_since: None,
            attached_since: None,
            last_grasp: f64::NEG_INFINITY,
            last_drop: f64::NEG_INFINITY,
            replans: 0,
        }
    }

    pub fn kind(&self) -> OperatorKind {
        self.kind
    }

    pub fn distraction_windows(&self) -> &[(f64, f64)] {
        &self.distraction
    }

    pub fn distracted_at(&self, t: f64) -> bool {
        self.distraction.iter().any(|(a, b)| t >= *a && t < *b)
    }

    fn compliance(&self) -> f64 {
        match self.kind {
            OperatorKind::Ignoring => 0.0,
            _ => self.cfg.compliance,
        }
    }

    /// Marks obstacles within sight, plus the whole prior map on the first
    /// look. Returns the newly perceived cells.
    fn look(&mut self, grid: &OccupancyGrid, base: &Pose2D, known_only_beyond: bool) -> Vec<Cell> {
        if self.perceived.is_empty() {
            self.perceived = vec![false; grid.len()];
        }
        let field = self.field.get_or_insert_with(|| DistanceField::new(grid, self.inflation_cap));
        let mut fresh = Vec::new();
        let res = grid.resolution();
        let r = self.cfg.vision_range_m;
        let Ok(center) = grid.pose_to_grid(base) else {
            return fresh;
        };
        let reach = (r / res).ceil() as i64;
        let (w, h) = (grid.width() as i64, grid.height() as i64);
        let (xs, ys) = if known_only_beyond {
            let (cx, cy) = (center.x as i64, center.y as i64);
            ((cx - reach).max(0)..(cx + reach + 1).min(w), (cy - reach).max(0)..(cy + reach + 1).min(h))
        } else {
            (0..w, 0..h)
        };
        for y in ys {
            for x in xs.clone() {
                let c = Cell::new(x as usize, y as usize);
                let i = grid.index(c);
                if self.perceived[i] {
                    continue;
                }
                let class = grid.class(c);
                let seen = class == crate::grid::CellClass::Known
                    || (class.is_occupied() && {
                        let (wx, wy) = grid.grid_to_world(c);
                        (wx - base.x).hypot(wy - base.y) <= r
                    });
                if seen {
                    self.perceived[i] = true;
                    field.insert(c);
                    fresh.push(c);
                }
            }
        }
        fresh
    }

    fn plan(&mut self, grid: &OccupancyGrid, from: &Pose2D, goal: &Pose2D) {
        let field = self.field.as_ref().expect("look() runs first");
        let mut view = GridView::inflated(grid, field, self.cfg.inflation_m);
        let (Some(start), Some(goal_cell)) = (view.world_to_cell(from.x, from.y), view.world_to_cell(goal.x, goal.y)) else {
            return;
        };
        if view.is_blocked(start) {
            view = GridView::inflated(grid, field, self.cfg.inflation_m.min(field.get(start)));
        }
        let d = self.approach_distance;
        let pre = (goal.x - d * goal.gamma.cos(), goal.y - d * goal.gamma.sin());
        let Some(pre_cell) = view.world_to_cell(pre.0, pre.1) else {
            return;
        };
        let Ok((mut cells, _)) = plan_cells(&view, start, pre_cell) else {
            return;
        };
        let wander_end = cells.len() - 1;
        cells.extend(bresenham(pre_cell, goal_cell).into_iter().skip(1));
        let path = GlobalPath::from_cells(&view, cells, Some(goal.gamma));

        let [alo, ahi] = self.cfg.wander_amplitude_m;
        let [llo, lhi] = self.cfg.wander_wavelength_m;
        let amp = self.rng.random_range(alo..=ahi);
        let wavelength = self.rng.random_range(llo..=lhi);
        let phase = self.rng.random_range(0.0..std::f64::consts::TAU);

        let mut arc = Vec::with_capacity(path.waypoints.len());
        let mut s = 0.0;
        for (i, w) in path.waypoints.iter().enumerate() {
            if i > 0 {
                s += w.distance(&path.waypoints[i - 1]);
            }
            arc.push(s);
        }
        let s_end = arc[wander_end];
        let mut points = Vec::with_capacity(path.waypoints.len());
        for (i, w) in path.waypoints.iter().enumerate() {
            let s = arc[i];
            // fade in and out over a metre so the path starts at the base
            let taper = (s.min(s_end - s) / 1.0).clamp(0.0, 1.0);
            let room = (field.get(path.cells[i]) - self.footprint - 0.05).max(0.0);
            let off = (amp * (std::f64::consts::TAU * s / wavelength + phase).sin() * taper).clamp(-room, room);
            let (sn, cs) = w.gamma.sin_cos();
            points.push((w.x - off * sn, w.y + off * cs));
        }
        let mut arc2 = Vec::with_capacity(points.len());
        let mut s = 0.0;
        for (i, p) in points.iter().enumerate() {
            if i > 0 {
                let q: (f64, f64) = points[i - 1];
                s += (p.0 - q.0).hypot(p.1 - q.1);
            }
            arc2.push(s);
        }
        self.intent = Some(Intent {
            points,
            arc: arc2,
            cursor: 0,
        });
    }

    fn tremor(&mut self, dt: f64) -> Wrench6 {
        let tau = self.cfg.noise_time_constant_s;
        let a = (-dt / tau).exp();
        let b = (1.0 - a * a).sqrt();
        for i in 0..6 {
            let sigma = if i < 3 { self.cfg.noise_force_n } else { self.cfg.noise_torque_nm };
            let z: f64 = StandardNormal.sample(&mut self.rng);
            self.noise[i] = a * self.noise[i] + b * sigma * z;
        }
        Wrench6::from_array(self.noise)
    }

    fn navigate(&mut self, v: &OperatorView) -> Wrench6 {
        let first = self.intent.is_none();
        if first {
            self.look(v.grid, &v.base, false);
            self.plan(v.grid, &v.base, &v.goal);
        } else if v.tick % 100 == 0 {
            let fresh = self.look(v.grid, &v.base, true);
            let field = self.field.as_ref().expect("initialized");
            let crowded = !fresh.is_empty()
                && self.intent.as_ref().is_some_and(|it| {
                    it.points[it.cursor..].iter().any(|p| match v.grid.world_to_grid(p.0, p.1) {
                        Ok(c) => field.get(c) < self.cfg.inflation_m - v.grid.resolution(),
                        Err(_) => false,
                    })
                });
            let near_end = self.intent.as_ref().is_some_and(|it| it.length() - it.arc[it.cursor] < self.approach_distance);
            if crowded && !near_end {
                self.plan(v.grid, &v.base, &v.goal);
                self.replans += 1;
            }
        }
        let Some(intent) = self.intent.as_mut() else {
            return Wrench6::zero();
        };
        intent.advance_cursor(v.base.x, v.base.y);
        let s_here = intent.arc[intent.cursor];
        let remaining = intent.length() - s_here;
        let target = intent.point_at(s_here + self.cfg.pursuit_distance_m);
        let (bx, by) = v.base.to_body(target.0, target.1);
        let l2 = (bx * bx + by * by).max(1e-6);
        let curvature = 2.0 * by / l2;

        // on the final approach the operator judges the stop by eye
        let to_go = if remaining < self.approach_distance {
            v.object_in_arm.x - self.standoff
        } else {
            remaining
        };
        let mut speed = self.cfg.cruise_speed_mps.min(0.5 * to_go);
        speed /= 1.0 + 1.5 * curvature.abs();
        if to_go < 0.01 {
            speed = 0.0;
        }
        let omega = speed.max(0.05) * curvature;

        let span = v.boundary.vb_e() - v.boundary.vb_i();
        let min_speed = v.kv * v.boundary.vb_i() / span;
        let d_target = if speed < 0.5 * min_speed {
            0.0
        } else {
            (speed * span / v.kv).clamp(v.boundary.vb_i() + 0.01, MAX_DRIVE_OFFSET_FRACTION * v.boundary.vb_e())
        };
        let psi_target = (omega / v.kr).clamp(-MAX_YAW_OFFSET_RAD, MAX_YAW_OFFSET_RAD);

        let here = Pose6::from_isometry(&v.leader_ee);
        let home = Pose6::from_isometry(&v.leader_home);
        let d = here.x() - home.x();
        let psi = wrap_angle(here.yaw() - home.yaw());
        let mut fx = self.cfg.tracking_gain_n_per_m * (d_target - d) - self.cfg.tracking_damping_ns_per_m * v.leader_twist[0];
        // the operator feels the outer boundary coming and holds back
        let guard = MAX_DRIVE_OFFSET_FRACTION * v.boundary.vb_e();
        if d.abs() > guard {
            fx -= BOUNDARY_GUARD_N_PER_M * (d - d.signum() * guard);
        }
        let tz = self.cfg.yaw_gain_nm_per_rad * (psi_target - psi) - self.cfg.yaw_damping_nms_per_rad * v.leader_twist[5];
        Wrench6::new(Vector3::new(fx, 0.0, 0.0), Vector3::new(0.0, 0.0, tz))
    }

    fn manipulate(&mut self, v: &OperatorView, keys: &mut OperatorInput) -> Wrench6 {
        let since = *self.manip_since.get_or_insert(v.time);
        let decay = (-(v.time - since) / self.cfg.estimate_refine_s).exp();
        let target = v.object_in_arm + self.bias_dir * (self.cfg.estimate_error_m * decay);
        // a compliant operator reads the cue as a hint about where the object is
        let hint = v.cue.force * (self.compliance() / self.cfg.manip_gain_n_per_m);
        let err = target - v.follower_ee;
        let perceived = target + hint - v.follower_ee;
        match v.object_state {
            ObjectState::Free => {
                if perceived.norm() < self.cfg.grasp_attempt_tolerance_m && v.time - self.last_grasp >= self.cfg.grasp_retry_s {
                    keys.grasp_key = true;
                    self.last_grasp = v.time;
                }
            }
            ObjectState::Attached => {
                let at = *self.attached_since.get_or_insert(v.time);
                if v.time - at >= self.cfg.drop_delay_s && v.time - self.last_drop >= self.cfg.grasp_retry_s {
                    keys.drop_key = true;
                    self.last_drop = v.time;
                }
            }
            ObjectState::InBin => {}
        }
        let hold = match v.object_state {
            ObjectState::Free => err,
            _ => Vector3::zeros(),
        };
        let lin = Vector3::new(v.leader_twist[0], v.leader_twist[1], v.leader_twist[2]);
        let ang = Vector3::new(v.leader_twist[3], v.leader_twist[4], v.leader_twist[5]);
        let force = hold * self.cfg.manip_gain_n_per_m - lin * self.cfg.manip_damping_ns_per_m;
        let rot = rotation_error(
            &v.leader_home.rotation.to_rotation_matrix(),
            &v.leader_ee.rotation.to_rotation_matrix(),
        );
        let torque = rot * self.cfg.manip_rot_gain_nm_per_rad - ang * self.cfg.manip_rot_damping_nms_per_rad;
        Wrench6::new(force, torque)
    }
}

impl OperatorSource for ScriptedOperator {
    fn input(&mut self, v: &OperatorView) -> OperatorInput {
        let tremor = self.tremor(v.dt);
        let mut out = OperatorInput::default();
        let intent = match v.mode {
            ControlMode::Navigation => self.navigate(v),
            ControlMode::Manipulation => self.manipulate(v, &mut out),
            _ => Wrench6::zero(),
        };
        if v.mode != ControlMode::Manipulation {
            self.manip_since = None;
        }
        if v.inhibited || self.distracted_at(v.time) {
            out.wrench = Wrench6::zero();
            return out;
        }
        out.wrench = intent + v.cue.scale(self.compliance()) + tremor;
        out
    }
}
