//! Fixed-step world: both arms, the Ackermann base, lidar discovery, the
//! eye-in-hand marker camera, grasping and collision bookkeeping.

use nalgebra::{Isometry3, Translation3, UnitQuaternion, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;
use thiserror::Error;

use crate::control::{saturate, LeaderCommand};
use crate::grid::{Cell, CellClass, DistanceField, OccupancyGrid};
use crate::kinematics::KinematicChain;
use crate::model::{BaseVelocity, JointVector7, Pose2D, Wrench6};
use crate::modes::ControlMode;
use crate::scenario::{CameraConfig, LidarConfig, Scenario, SwitchingConfig};
use crate::vehicle::Bicycle;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("non-finite state at tick {tick} ({what}): {dump}")]
    NonFinite { tick: u64, what: &'static str, dump: String },
    #[error("non-finite command at tick {tick}: {what}")]
    BadCommand { tick: u64, what: &'static str },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectState {
    Free,
    Attached,
    InBin,
}

impl ObjectState {
    pub fn as_str(self) -> &'static str {
        match self {
            ObjectState::Free => "free",
            ObjectState::Attached => "attached",
            ObjectState::InBin => "in_bin",
        }
    }
}

/// Everything the world integrates. Snapshots are plain clones.
#[derive(Debug, Clone)]
pub struct WorldState {
    pub tick: u64,
    pub time: f64,
    pub leader_q: JointVector7,
    pub leader_qd: JointVector7,
    pub follower_q: JointVector7,
    pub follower_qd: JointVector7,
    pub base: Pose2D,
    /// Forward speed and realized yaw rate during the last step.
    pub base_velocity: BaseVelocity,
    pub grid: OccupancyGrid,
    /// World position while free; arm-frame bin position while in the bin.
    pub object: Vector3<f64>,
    pub object_state: ObjectState,
    pub mode: ControlMode,
    pub in_collision: bool,
    pub collisions: u32,
    leader_lock: Option<JointVector7>,
}

/// One tick of commands. Replaying the same inputs reproduces the same states.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInput {
    pub mode: ControlMode,
    pub leader: LeaderCommand,
    pub operator_wrench: Wrench6,
    pub base_cmd: BaseVelocity,
    pub follower_torque: JointVector7,
    pub grasp: bool,
    pub release: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepOutput {
    pub discovered: Vec<Cell>,
    pub collision_started: bool,
    pub grasped: bool,
    pub released: bool,
}

#[derive(Debug, Clone)]
pub struct WorldParams {
    pub dt: f64,
    pub damping: f64,
    pub leader_home: JointVector7,
    pub follower_home: JointVector7,
    pub home_kp: f64,
    pub stiff_kp: f64,
    pub mount: Vector3<f64>,
    pub bin: Vector3<f64>,
    pub footprint_radius: f64,
    pub vehicle: Bicycle,
    pub lidar: LidarConfig,
    pub camera: CameraConfig,
    pub switching: SwitchingConfig,
}

impl WorldParams {
    pub fn from_scenario(s: &Scenario) -> Self {
        let c = &s.config;
        Self {
            dt: c.sim.dt_s,
            damping: c.arms.joint_damping_nms_per_rad,
            leader_home: c.leader_home(),
            follower_home: c.follower_home(),
            home_kp: c.gains.home_kp_nm_per_rad,
            stiff_kp: c.gains.stiff_kp_nm_per_rad,
            mount: Vector3::new(c.arms.mount_x_m, c.arms.mount_y_m, c.arms.mount_z_m),
            bin: Vector3::new(c.bin.x_m, c.bin.y_m, c.bin.z_m),
            footprint_radius: c.planner.footprint_radius_m,
            vehicle: Bicycle::from_config(&c.vehicle),
            lidar: c.lidar,
            camera: c.camera,
            switching: c.switching,
        }
    }
}

#[derive(Debug, Clone)]
pub struct World {
    params: WorldParams,
    chain: KinematicChain,
    state: WorldState,
    /// Distance to obstacles of every class, for collision tests.
    obstacles: DistanceField,
    rng: ChaCha8Rng,
}

/// Pose of the follower arm base for a given vehicle pose.
pub fn arm_base_pose(base: &Pose2D, mount: &Vector3<f64>) -> Isometry3<f64> {
    let (x, y) = base.to_world(mount.x, mount.y);
    Isometry3::from_parts(Translation3::new(x, y, mount.z), UnitQuaternion::from_euler_angles(0.0, 0.0, base.gamma))
}

/// Whether an object position (follower arm base frame) is in the graspable band.
pub fn graspable(p: &Vector3<f64>, cfg: &SwitchingConfig) -> bool {
    p.x >= cfg.graspable_x_min_m && p.x <= cfg.graspable_x_max_m && p.y.abs() <= cfg.graspable_half_width_m
}

/// Exact distance from a point to the square of a cell.
fn point_cell_distance(grid: &OccupancyGrid, gx: f64, gy: f64, c: Cell) -> f64 {
    let ex = (gx - (c.x as f64 + 0.5)).abs() - 0.5;
    let ey = (gy - (c.y as f64 + 0.5)).abs() - 0.5;
    grid.resolution() * ex.max(0.0).hypot(ey.max(0.0))
}

impl World {
    pub fn new(scenario: &Scenario, seed: u64) -> Self {
        let params = WorldParams::from_scenario(scenario);
        let grid = scenario.grid.clone();
        let mut obstacles = DistanceField::new(&grid, params.footprint_radius + 3.0 * grid.resolution());
        for c in grid.occupied_cells() {
            obstacles.insert(c);
        }
        let o = &scenario.config.object;
        let state = WorldState {
            tick: 0,
            time: 0.0,
            leader_q: params.leader_home,
            leader_qd: JointVector7::zeros(),
            follower_q: params.follower_home,
            follower_qd: JointVector7::zeros(),
            base: scenario.config.start.pose(),
            base_velocity: BaseVelocity::ZERO,
            grid,
            object: Vector3::new(o.x_m, o.y_m, o.z_m),
            object_state: ObjectState::Free,
            mode: ControlMode::Navigation,
            in_collision: false,
            collisions: 0,
            leader_lock: None,
        };
        let mut w = Self {
            params,
            chain: scenario.chain.clone(),
            state,
            obstacles,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_ca3e_0000_0001),
        };
        w.lidar_scan();
        w.state.in_collision = w.base_in_collision();
        w
    }

    pub fn state(&self) -> &WorldState {
        &self.state
    }

    pub fn params(&self) -> &WorldParams {
        &self.params
    }

    pub fn chain(&self) -> &KinematicChain {
        &self.chain
    }

    pub fn arm_base(&self) -> Isometry3<f64> {
        arm_base_pose(&self.state.base, &self.params.mount)
    }

    /// Follower end-effector in its arm base frame.
    pub fn follower_ee(&self) -> Isometry3<f64> {
        self.chain.fk_unchecked(&self.state.follower_q)
    }

    /// Current object position in the world frame.
    pub fn object_world(&self) -> Vector3<f64> {
        match self.state.object_state {
            ObjectState::Free => self.state.object,
            ObjectState::Attached => (self.arm_base() * nalgebra::Point3::from(self.follower_ee().translation.vector)).coords,
            ObjectState::InBin => (self.arm_base() * nalgebra::Point3::from(self.state.object)).coords,
        }
    }

    /// Object position in the follower arm base frame.
    pub fn object_in_arm(&self) -> Vector3<f64> {
        self.arm_base().inverse_transform_point(&self.object_world().into()).coords
    }

    /// Marker detection: the object position in the arm base frame if it is
    /// inside the camera cone and range band, with optional zero-mean noise
    /// (normal, truncated at four standard deviations).
    pub fn marker_visible(&mut self) -> Option<Vector3<f64>> {
        if self.state.object_state != ObjectState::Free {
            return None;
        }
        let obj = self.object_in_arm();
        let ee = self.follower_ee();
        let cam = &self.params.camera;
        if !marker_in_view(&ee, &obj, cam) {
            return None;
        }
        if cam.noise_sigma_m > 0.0 {
            let sigma = cam.noise_sigma_m;
            let n = Normal::new(0.0, sigma).expect("validated sigma");
            // Gaussian truncated at 4 sigma by resampling
            let mut draw = || loop {
                let v: f64 = n.sample(&mut self.rng);
                if v.abs() <= 4.0 * sigma {
                    break v;
                }
            };
            let noise = Vector3::new(draw(), draw(), draw());
            Some(obj + noise)
        } else {
            Some(obj)
        }
    }

    /// Attaches the object if the gripper is close enough. Returns whether
    /// the object is attached afterwards.
    pub fn try_grasp(&mut self, mode: ControlMode) -> bool {
        match self.state.object_state {
            ObjectState::Attached => return true,
            ObjectState::InBin => return false,
            ObjectState::Free => {}
        }
        if mode != ControlMode::Manipulation {
            return false;
        }
        let d = (self.follower_ee().translation.vector - self.object_in_arm()).norm();
        if d <= self.params.switching.grasp_eps_m {
            self.state.object_state = ObjectState::Attached;
            true
        } else {
            false
        }
    }

    /// Opens the gripper. Returns true if an attached object was let go.
    pub fn release(&mut self) -> bool {
        if self.state.object_state != ObjectState::Attached {
            return false;
        }
        let ee = self.follower_ee().translation.vector;
        let b = self.params.bin;
        if (ee.x - b.x).hypot(ee.y - b.y) <= 0.1 && ee.z >= b.z - 0.05 {
            self.state.object_state = ObjectState::InBin;
            self.state.object = b;
        } else {
            let w = self.object_world();
            self.state.object_state = ObjectState::Free;
            self.state.object = Vector3::new(w.x, w.y, 0.0);
        }
        true
    }

    /// Raycasts every beam and marks the first known or semi-known cell hit.
    /// Returns the cells discovered by this scan.
    pub fn lidar_scan(&mut self) -> Vec<Cell> {
        let l = self.params.lidar;
        let base = self.state.base;
        let (ox, oy) = base.to_world(l.mount_x_m, 0.0);
        let mut fresh = Vec::new();
        for i in 0..l.beams {
            let a = base.gamma - 0.5 * l.span_rad + l.span_rad * i as f64 / l.beams as f64;
            if let Some(c) = raycast(&self.state.grid, ox, oy, a, l.range_m) {
                if self.state.grid.discover(c) {
                    fresh.push(c);
                }
            }
        }
        fresh
    }

    fn base_in_collision(&self) -> bool {
        let g = &self.state.grid;
        let Ok(cell) = g.pose_to_grid(&self.state.base) else {
            return true;
        };
        let r = self.params.footprint_radius;
        if self.obstacles.get(cell) - self.obstacles.half_diagonal() > r {
            return false;
        }
        let (gx, gy) = g.world_to_local(self.state.base.x, self.state.base.y);
        let reach = (r / g.resolution()).ceil() as i64 + 1;
        for y in (cell.y as i64 - reach).max(0)..=(cell.y as i64 + reach).min(g.height() as i64 - 1) {
            for x in (cell.x as i64 - reach).max(0)..=(cell.x as i64 + reach).min(g.width() as i64 - 1) {
                let c = Cell::new(x as usize, y as usize);
                if g.class(c).is_occupied() && point_cell_distance(g, gx, gy, c) < r {
                    return true;
                }
            }
        }
        false
    }

    fn joint_pd(&self, q: &JointVector7, qd: &JointVector7, target: &JointVector7, kp: f64) -> JointVector7 {
        let kd = 2.0 * kp.sqrt();
        saturate(&((target - q) * kp - qd * kd), self.chain.torque_limits())
    }

    fn integrate(&self, q: &mut JointVector7, qd: &mut JointVector7, tau: &JointVector7) {
        let dt = self.params.dt;
        *qd += (tau - *qd * self.params.damping) * dt;
        *q += *qd * dt;
        for i in 0..7 {
            let (lo, hi) = (self.chain.lower()[i], self.chain.upper()[i]);
            if q[i] < lo || q[i] > hi {
                q[i] = q[i].clamp(lo, hi);
                qd[i] = 0.0;
            }
        }
    }

    pub fn step(&mut self, input: &StepInput) -> Result<StepOutput, SimError> {
        let tick = self.state.tick;
        let finite = input.leader.torque.iter().all(|v| v.is_finite())
            && input.operator_wrench.is_finite()
            && input.base_cmd.v_x.is_finite()
            && input.base_cmd.v_gamma.is_finite()
            && input.follower_torque.iter().all(|v| v.is_finite());
        if !finite {
            return Err(SimError::BadCommand { tick, what: "step input" });
        }
        let mut out = StepOutput::default();
        self.state.mode = input.mode;

        if input.release {
            out.released = self.release();
        }
        if input.grasp {
            let before = self.state.object_state;
            out.grasped = self.try_grasp(input.mode) && before != ObjectState::Attached;
        }

        // leader
        let s = &self.state;
        let (lq, lqd) = (s.leader_q, s.leader_qd);
        let cmd = &input.leader;
        let mut lock = s.leader_lock;
        if cmd.stiffen && lock.is_none() {
            lock = Some(lq);
        }
        if !cmd.stiffen {
            lock = None;
        }
        let drive = if cmd.home {
            self.joint_pd(&lq, &lqd, &self.params.leader_home, self.params.home_kp)
        } else if let Some(target) = lock {
            self.joint_pd(&lq, &lqd, &target, self.params.stiff_kp)
        } else {
            cmd.torque
        };
        let j = self.chain.jacobian_unchecked(&lq);
        let tau_l = drive + j.transpose() * input.operator_wrench.to_vector();
        let (mut lq, mut lqd) = (lq, lqd);
        self.integrate(&mut lq, &mut lqd, &tau_l);

        let (mut fq, mut fqd) = (self.state.follower_q, self.state.follower_qd);
        self.integrate(&mut fq, &mut fqd, &input.follower_torque);

        let base = self.params.vehicle.advance(&self.state.base, &input.base_cmd, self.params.dt);
        let yaw_rate = self.params.vehicle.yaw_rate(&input.base_cmd);

        let st = &mut self.state;
        st.leader_lock = lock;
        st.leader_q = lq;
        st.leader_qd = lqd;
        st.follower_q = fq;
        st.follower_qd = fqd;
        st.base = base;
        st.base_velocity = BaseVelocity::new(input.base_cmd.v_x, yaw_rate);
        st.tick += 1;
        st.time = st.tick as f64 * self.params.dt;

        let ok = lq.iter().chain(lqd.iter()).chain(fq.iter()).chain(fqd.iter()).all(|v| v.is_finite())
            && base.is_finite();
        if !ok {
            return Err(SimError::NonFinite {
                tick,
                what: "joint or base state",
                dump: format!(
                    "leader q={:?} qd={:?} follower q={:?} qd={:?} base={:?}",
                    lq.as_slice(),
                    lqd.as_slice(),
                    fq.as_slice(),
                    fqd.as_slice(),
                    base
                ),
            });
        }

        let hit = self.base_in_collision();
        if hit && !self.state.in_collision {
            self.state.collisions += 1;
            out.collision_started = true;
        }
        self.state.in_collision = hit;

        if self.state.tick % self.params.lidar.period_ticks as u64 == 0 {
            out.discovered = self.lidar_scan();
        }
        Ok(out)
    }
}

/// Camera test on an object position expressed in the arm base frame.
pub fn marker_in_view(ee: &Isometry3<f64>, obj: &Vector3<f64>, cam: &CameraConfig) -> bool {
    let axis = ee.rotation * Vector3::z();
    let origin = ee.translation.vector + axis * cam.offset_m;
    let v = obj - origin;
    let dist = v.norm();
    if dist < cam.min_range_m || dist > cam.max_range_m {
        return false;
    }
    let along = v.dot(&axis);
    along > 0.0 && (along / dist).clamp(-1.0, 1.0).acos() <= cam.half_angle_rad
}

/// First lidar-visible cell (known or semi-known) along a ray, by grid traversal.
pub fn raycast(grid: &OccupancyGrid, x: f64, y: f64, angle: f64, range: f64) -> Option<Cell> {
    let (gx, gy) = grid.world_to_local(x, y);
    let dir = angle - grid.origin().gamma;
    let (dx, dy) = (dir.cos(), dir.sin());
    let max_t = range / grid.resolution();
    let (mut cx, mut cy) = (gx.floor() as i64, gy.floor() as i64);
    let step_x = if dx > 0.0 { 1 } else { -1 };
    let step_y = if dy > 0.0 { 1 } else { -1 };
    let t_delta_x = if dx != 0.0 { (1.0 / dx).abs() } else { f64::INFINITY };
    let t_delta_y = if dy != 0.0 { (1.0 / dy).abs() } else { f64::INFINITY };
    let mut t_max_x = if dx > 0.0 {
        (cx as f64 + 1.0 - gx) / dx
    } else if dx < 0.0 {
        (gx - cx as f64) / -dx
    } else {
        f64::INFINITY
    };
    let mut t_max_y = if dy > 0.0 {
        (cy as f64 + 1.0 - gy) / dy
    } else if dy < 0.0 {
        (gy - cy as f64) / -dy
    } else {
        f64::INFINITY
    };
    let mut t = 0.0;
    while t <= max_t {
        if !grid.contains(cx, cy) {
            return None;
        }
        let c = Cell::new(cx as usize, cy as usize);
        if matches!(grid.class(c), CellClass::Known | CellClass::SemiKnown) {
            return Some(c);
        }
        if t_max_x < t_max_y {
            t = t_max_x;
            t_max_x += t_delta_x;
            cx += step_x;
        } else {
            t = t_max_y;
            t_max_y += t_delta_y;
            cy += step_y;
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::ScenarioConfig;

    fn scenario(map: &str, start: (f64, f64, f64)) -> Scenario {
        let mut cfg = ScenarioConfig::builtin_default();
        cfg.start.x_m = start.0;
        cfg.start.y_m = start.1;
        cfg.start.gamma_rad = start.2;
        cfg.map.resolution_m = 0.1;
        cfg.object.x_m = 0.55;
        cfg.object.y_m = 0.55;
        Scenario::from_parts(cfg, map.to_string(), KinematicChain::panda_toml().to_string()).unwrap()
    }

    fn open_map(w: usize, h: usize) -> String {
        (0..h).map(|_| ".".repeat(w) + "\n").collect()
    }

    fn idle() -> StepInput {
        StepInput {
            mode: ControlMode::Navigation,
            leader: LeaderCommand::torque(JointVector7::zeros()),
            operator_wrench: Wrench6::zero(),
            base_cmd: BaseVelocity::ZERO,
            follower_torque: JointVector7::zeros(),
            grasp: false,
            release: false,
        }
    }

    #[test]
    fn equilibrium_only_advances_time() {
        let s = scenario(&open_map(60, 40), (3.0, 2.0, 0.3));
        let mut w = World::new(&s, 1);
        let before = w.state().clone();
        for _ in 0..10 {
            w.step(&idle()).unwrap();
        }
        let after = w.state();
        assert_eq!(after.leader_q, before.leader_q);
        assert_eq!(after.follower_q, before.follower_q);
        assert_eq!(after.base, before.base);
        assert!((after.time - 0.01).abs() < 1e-15);
    }

    #[test]
    fn straight_drive_one_second() {
        let s = scenario(&open_map(60, 40), (1.0, 2.0, 0.0));
        let mut w = World::new(&s, 1);
        let mut input = idle();
        input.base_cmd = BaseVelocity::new(0.5, 0.0);
        for _ in 0..1000 {
            w.step(&input).unwrap();
        }
        assert!((w.state().base.x - 1.5).abs() < 1e-9);
    }

    #[test]
    fn driving_into_unknown_obstacle_collides() {
        let mut map = String::new();
        for y in (0..40).rev() {
            for x in 0..60 {
                map.push(if (30..33).contains(&x) && (15..25).contains(&y) { 'u' } else { '.' });
            }
            map.push('\n');
        }
        let s = scenario(&map, (1.5, 2.0, 0.0));
        let mut w = World::new(&s, 1);
        assert!(w.state().grid.discovered_cells().next().is_none());
        let mut input = idle();
        input.base_cmd = BaseVelocity::new(0.5, 0.0);
        let mut events = 0;
        for _ in 0..4000 {
            let out = w.step(&input).unwrap();
            events += out.collision_started as u32;
            assert!(out.discovered.is_empty());
        }
        assert_eq!(events, 1);
        assert_eq!(w.state().collisions, 1);
    }

    fn one_cell_map(cells: &[(usize, usize, char)]) -> String {
        let mut rows = vec![vec!['.'; 100]; 40];
        for &(x, y, c) in cells {
            rows[y][x] = c;
        }
        rows.iter().rev().map(|r| r.iter().collect::<String>() + "\n").collect()
    }

    #[test]
    fn lidar_discovery_rules() {
        // lidar sits at x = 1.0 + 0.3 on row y = 20
        let s = scenario(&one_cell_map(&[(33, 20, 's')]), (1.0, 2.05, 0.0));
        let w = World::new(&s, 1);
        assert!(w.state().grid.is_discovered(Cell::new(33, 20)));

        let s = scenario(&one_cell_map(&[(33, 20, 'u')]), (1.0, 2.05, 0.0));
        let w = World::new(&s, 1);
        assert!(!w.state().grid.is_discovered(Cell::new(33, 20)));

        let s = scenario(&one_cell_map(&[(25, 20, '#'), (33, 20, 's')]), (1.0, 2.05, 0.0));
        let w = World::new(&s, 1);
        assert!(w.state().grid.is_discovered(Cell::new(25, 20)));
        assert!(!w.state().grid.is_discovered(Cell::new(33, 20)));
    }

    #[test]
    fn graspable_band() {
        let c = SwitchingConfig::default();
        assert!(graspable(&Vector3::new(0.30, 0.0, 0.0), &c));
        assert!(!graspable(&Vector3::new(0.50, 0.0, 0.0), &c));
        assert!(!graspable(&Vector3::new(0.30, 0.5, 0.0), &c));
    }

    fn down_camera() -> Isometry3<f64> {
        Isometry3::from_parts(
            Translation3::new(0.3, 0.0, 0.6),
            UnitQuaternion::from_euler_angles(std::f64::consts::PI, 0.0, 0.0),
        )
    }

    #[test]
    fn camera_frustum() {
        let cam = CameraConfig::default();
        let ee = down_camera();
        let lens_z = 0.6 - cam.offset_m;
        assert!(marker_in_view(&ee, &Vector3::new(0.3, 0.0, lens_z - 0.3), &cam));
        assert!(!marker_in_view(&ee, &Vector3::new(0.3, 0.0, lens_z + 0.3), &cam));
        assert!(!marker_in_view(&ee, &Vector3::new(0.3, 0.0, lens_z - 2.0), &cam));
        assert!(!marker_in_view(&ee, &Vector3::new(0.9, 0.0, lens_z - 0.3), &cam));
    }

    #[test]
    fn camera_noise_statistics() {
        let mut cfg = ScenarioConfig::builtin_default();
        cfg.camera.noise_sigma_m = 0.005;
        let s = Scenario::builtin_default();
        let s = Scenario::from_parts(cfg, s.map_text.clone(), s.chain_text.clone()).unwrap();
        let mut w = World::new(&s, 9);
        // place the object 0.3 m below the lens
        let ee = w.follower_ee();
        let axis = ee.rotation * Vector3::z();
        let target_arm = ee.translation.vector + axis * (s.config.camera.offset_m + 0.3);
        let world_pt = w.arm_base() * nalgebra::Point3::from(target_arm);
        w.state.object = world_pt.coords;
        let truth = w.object_in_arm();
        let sigma = 0.005;
        let mut sum = Vector3::zeros();
        for _ in 0..1000 {
            let p = w.marker_visible().expect("visible");
            let e = p - truth;
            assert!(e.amax() <= 4.0 * sigma);
            sum += e;
        }
        let mean = sum / 1000.0;
        assert!(mean.amax() <= 3.0 * sigma / 1000f64.sqrt());
    }

    #[test]
    fn grasp_is_gated_and_idempotent() {
        let s = Scenario::builtin_default();
        let mut w = World::new(&s, 1);
        let ee_world = (w.arm_base() * nalgebra::Point3::from(w.follower_ee().translation.vector)).coords;
        w.state.object = ee_world + Vector3::new(0.05, 0.0, 0.0);
        assert!(!w.try_grasp(ControlMode::Manipulation));
        w.state.object = ee_world + Vector3::new(0.01, 0.0, 0.0);
        assert!(!w.try_grasp(ControlMode::Navigation));
        assert!(w.try_grasp(ControlMode::Manipulation));
        assert_eq!(w.state().object_state, ObjectState::Attached);
        assert!(w.try_grasp(ControlMode::Manipulation));

        let mut input = idle();
        input.mode = ControlMode::Manipulation;
        input.grasp = true;
        let out = w.step(&input).unwrap();
        assert!(!out.grasped, "second grasp must not emit another event");
    }

    #[test]
    fn energy_never_increases_without_input() {
        let s = Scenario::builtin_default();
        let mut w = World::new(&s, 1);
        w.state.leader_qd = JointVector7::from_fn(|i, _| 0.3 - 0.1 * i as f64);
        let mut e = w.state().leader_qd.norm_squared();
        for _ in 0..500 {
            w.step(&idle()).unwrap();
            let e2 = w.state().leader_qd.norm_squared();
            assert!(e2 <= e);
            e = e2;
        }
    }

    #[test]
    fn no_sideslip() {
        let s = Scenario::builtin_default();
        let mut w = World::new(&s, 1);
        let mut input = idle();
        input.base_cmd = BaseVelocity::new(0.3, 0.4);
        for _ in 0..500 {
            let p0 = w.state().base;
            w.step(&input).unwrap();
            let p1 = w.state().base;
            // displacement is along the chord, whose body-frame lateral share is
            // second order in dt
            let (_, lateral) = p0.to_body(p1.x, p1.y);
            let turned = crate::model::wrap_angle(p1.gamma - p0.gamma);
            assert!((lateral - 0.3e-3 * (turned / 2.0).sin()).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_inputs_identical_states() {
        let s = Scenario::builtin_default();
        let mut a = World::new(&s, 3);
        let mut b = World::new(&s, 3);
        let mut input = idle();
        input.base_cmd = BaseVelocity::new(0.4, 0.2);
        input.operator_wrench = Wrench6::from_array([3.0, 1.0, 0.0, 0.0, 0.0, 0.5]);
        for _ in 0..1500 {
            a.step(&input).unwrap();
            b.step(&input).unwrap();
        }
        assert_eq!(a.state().leader_q, b.state().leader_q);
        assert_eq!(a.state().base, b.state().base);
    }

    #[test]
    fn non_finite_command_is_rejected() {
        let s = Scenario::builtin_default();
        let mut w = World::new(&s, 1);
        let mut input = idle();
        input.base_cmd = BaseVelocity::new(f64::NAN, 0.0);
        assert!(matches!(w.step(&input), Err(SimError::BadCommand { .. })));
    }
}
