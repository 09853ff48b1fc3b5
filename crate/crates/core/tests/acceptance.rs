//! Acceptance suite. Runs every criterion at its stated tolerance and prints
//! one PASS/FAIL line each; exits nonzero if any fails.
//!
//! Built with `harness = false` so the output is a plain report, and so the
//! binary can re-run itself to compare trial hashes across processes.

use std::collections::HashMap;
use std::f64::consts::{PI, SQRT_2};
use std::process::ExitCode;
use std::sync::Mutex;
use std::time::Instant;

use nalgebra::{Isometry3, Matrix4, SMatrix, Vector3, Vector6};
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use teleop_core::control::{
    base_velocity_from_offset, follower_mirror_torque, hold_wrench, leader_torque, navigation_cue, nullspace_torque,
    ControllerGains, HoldGains, Phi, VirtualBoundary,
};
use teleop_core::grid::{cell_box_distance, Cell, DistanceField, OccupancyGrid};
use teleop_core::harness::batch::run_batch_with;
use teleop_core::harness::{run_trial, Condition, Outcome, RecordLevel, TrialRecord, TrialSummary};
use teleop_core::kinematics::{pinv, ChainFile, JointSpec, KinematicChain};
use teleop_core::model::{joint_vector, BaseVelocity, Jacobian6x7, JointVector7, Pose2D, Wrench6};
use teleop_core::modes::ControlMode;
use teleop_core::planning::dwa::{candidate_commands, dwa_step, rollout, BaseState, DwaParams};
use teleop_core::planning::global::{plan_cells, plan_global, GlobalPath, GridView, PathCost};
use teleop_core::scenario::{Scenario, ScenarioConfig, BASE_SPEED_CAP};

const HASH_FLAG: &str = "--print-trial-hash";
const SEEDS: u64 = 20;

struct Report {
    lines: Vec<(bool, String, String)>,
}

impl Report {
    fn add(&mut self, name: &str, result: Result<String, String>) {
        let (ok, detail) = match result {
            Ok(d) => (true, d),
            Err(d) => (false, d),
        };
        println!("[{}] {name}: {detail}", if ok { "PASS" } else { "FAIL" });
        self.lines.push((ok, name.to_string(), detail));
    }
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------- control law

fn close(a: f64, b: f64, what: &str) -> Result<(), String> {
    check((a - b).abs() <= 1e-9, || format!("{what}: got {a}, expected {b}"))
}

fn planar_chain() -> KinematicChain {
    let joint = |a: f64| JointSpec {
        a_m: a,
        d_m: 0.0,
        alpha_rad: 0.0,
        theta_offset_rad: 0.0,
        lower_rad: -PI,
        upper_rad: PI,
        torque_limit_nm: 100.0,
        velocity_limit_radps: 2.0,
    };
    let file = ChainFile {
        schema_version: 1,
        name: "planar".into(),
        tool: Default::default(),
        joints: vec![joint(0.0), joint(1.0), joint(1.0), joint(0.0), joint(0.0), joint(0.0), joint(0.0)],
    };
    KinematicChain::from_file(&file).expect("planar chain")
}

/// Modified-DH forward kinematics with plain 4x4 matrices, straight from the
/// chain file.
fn dh_fk(file: &ChainFile, q: &[f64; 7]) -> Matrix4<f64> {
    let row = |a: f64, d: f64, alpha: f64, theta: f64| {
        let (sa, ca) = alpha.sin_cos();
        let (st, ct) = theta.sin_cos();
        Matrix4::new(
            ct, -st, 0.0, a, //
            st * ca, ct * ca, -sa, -d * sa, //
            st * sa, ct * sa, ca, d * ca, //
            0.0, 0.0, 0.0, 1.0,
        )
    };
    let mut t = Matrix4::<f64>::identity();
    for (j, qi) in file.joints.iter().zip(q) {
        t *= row(j.a_m, j.d_m, j.alpha_rad, j.theta_offset_rad + qi);
    }
    let tool = &file.tool;
    t * row(tool.a_m, tool.d_m, tool.alpha_rad, tool.theta_offset_rad)
}

/// Pseudo-inverse of `J^T` through nalgebra's own SVD routine.
fn oracle_pinv_jt(j: &Jacobian6x7) -> SMatrix<f64, 6, 7> {
    let jt = j.transpose();
    let smax = jt.singular_values().max();
    jt.pseudo_inverse(1e-6 * smax).expect("svd converges")
}

fn matvec_jt(j: &Jacobian6x7, f: &[f64; 6]) -> [f64; 7] {
    let mut out = [0.0; 7];
    for (c, o) in out.iter_mut().enumerate() {
        for r in 0..6 {
            *o += j[(r, c)] * f[r];
        }
    }
    out
}

fn control_law_fidelity() -> Result<String, String> {
    let started = Instant::now();
    let cfg = ScenarioConfig::builtin_default();
    let gains = ControllerGains::from_config(&cfg.gains).map_err(|e| e.to_string())?;
    let mut n = 0;
    let mut c = |r: Result<(), String>| -> Result<(), String> {
        n += 1;
        r
    };

    // constants that come straight from the source
    c(close(cfg.virtual_boundary.vb_i_m, 0.05, "vb_i"))?;
    c(close(cfg.virtual_boundary.vb_e_m, 0.4, "vb_e"))?;
    c(close(gains.kv_free, 0.5, "K_v free"))?;
    c(close(gains.kv_obstacle, 0.2, "K_v obstacle"))?;
    c(close(gains.kr, -1.0, "K_r"))?;
    c(close(gains.beta(), 2.0 * gains.alpha().sqrt(), "beta"))?;

    // base velocity mapping
    let vb = VirtualBoundary::new(0.05, 0.4).unwrap();
    let o = base_velocity_from_offset(0.04, 0.0, &vb, &gains, false);
    c(close(o.velocity.v_x, 0.0, "d = 0.04 inside deadzone"))?;
    let o = base_velocity_from_offset(0.35, 0.0, &vb, &gains, false);
    c(close(o.velocity.v_x, 0.5 * 0.35 / 0.35, "d = 0.35"))?;
    let o = base_velocity_from_offset(0.0, 0.2, &vb, &gains, false);
    c(close(o.velocity.v_gamma, -0.2, "yaw offset 0.2"))?;
    let o = base_velocity_from_offset(0.45, 0.1, &vb, &gains, false);
    c(check(o.velocity == BaseVelocity::ZERO && o.home_return, || "d = 0.45 must stop and raise home return".into()))?;

    // navigation cue
    let k = [20.0, 20.0, 20.0, 5.0, 5.0, 10.0];
    let p = Pose2D::new(1.0, 2.0, 0.7);
    let ahead = Pose2D::new(1.0 + 0.1 * 0.7f64.cos(), 2.0 + 0.1 * 0.7f64.sin(), 0.75);
    let w = navigation_cue(&p, &ahead, &k);
    let expect = [2.0, 0.0, 0.0, 0.0, 0.0, 0.5];
    for (i, (a, b)) in w.to_array().iter().zip(expect).enumerate() {
        c(close(*a, b, &format!("cue component {i}")))?;
    }
    c(check(navigation_cue(&p, &p, &k).is_zero(), || "cue on path must be zero".into()))?;
    let lateral = navigation_cue(&p, &Pose2D::new(1.0 - 0.7f64.sin(), 2.0 + 0.7f64.cos(), 0.7), &k);
    c(check(lateral.force.y == 0.0 && lateral.force.z == 0.0, || "lateral cue force must be exactly zero".into()))?;

    // follower mirroring
    let mut kp = JointVector7::from_element(10.0);
    kp[2] = 50.0;
    let mg = ControllerGains::new(kp, JointVector7::from_element(4.0), 1.0).unwrap();
    let mut q_l = JointVector7::zeros();
    q_l[2] = 0.1;
    let big = JointVector7::from_element(1e3);
    let tau = follower_mirror_torque(&q_l, &JointVector7::zeros(), &JointVector7::zeros(), &mg, &big);
    for i in 0..7 {
        c(close(tau[i], if i == 2 { 5.0 } else { 0.0 }, &format!("mirror torque joint {}", i + 1)))?;
    }

    // home holding
    let hg = HoldGains {
        stiffness: [0.0, 100.0, 0.0, 0.0, 0.0, 0.0],
        damping: [0.0; 6],
    };
    let home = Isometry3::identity();
    let w = hold_wrench(&Isometry3::translation(0.0, 0.1, 0.0), &home, &Vector6::zeros(), &hg);
    for (i, (a, b)) in w.to_array().iter().zip([0.0, -10.0, 0.0, 0.0, 0.0, 0.0]).enumerate() {
        c(close(*a, b, &format!("hold wrench component {i}")))?;
    }
    let hx = HoldGains {
        stiffness: [100.0; 6],
        damping: [10.0; 6],
    };
    let wx = hold_wrench(&Isometry3::translation(0.2, 0.0, 0.0), &home, &Vector6::zeros(), &hx);
    c(check(wx.is_zero(), || "displacement along x must give zero hold wrench".into()))?;

    // blended leader torque and null-space damping on the default chain
    let chain = KinematicChain::panda();
    let q = cfg.leader_home();
    let jac = chain.jacobian(&q).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut rand7 = || JointVector7::from_fn(|_, _| rng.random_range(-1.0..1.0));
    let qdot = rand7();
    let tau_t = rand7();
    let zero = nullspace_torque(&chain, &q, &JointVector7::zeros(), None, &gains);
    c(check(zero.norm() == 0.0, || format!("null-space torque at rest: {zero}")))?;
    let tau_ns = nullspace_torque(&chain, &q, &qdot, None, &gains);
    let jt = jac.transpose();
    let n_oracle = SMatrix::<f64, 7, 7>::identity() - jt * oracle_pinv_jt(&jac);
    let expect = -(n_oracle * qdot) * gains.beta();
    c(check((tau_ns - expect).amax() <= 1e-9, || format!("projected damping differs by {}", (tau_ns - expect).amax())))?;
    let f_fmr = [3.0, -1.0, 2.0, 0.5, -0.2, 0.3];
    let f_fra = [-2.0, 1.5, 0.0, 0.1, 0.4, -0.6];
    let lim = JointVector7::from_element(1e4);
    let w_fmr = Wrench6::from_array(f_fmr);
    let w_fra = Wrench6::from_array(f_fra);
    let nav = leader_torque(Phi::Navigation, &tau_ns, &jac, &w_fra, &w_fmr, &tau_t, &lim);
    let jf = matvec_jt(&jac, &f_fmr);
    for i in 0..7 {
        c(close(nav[i] - tau_ns[i] - tau_t[i], jf[i], &format!("navigation blend joint {}", i + 1)))?;
    }
    let man = leader_torque(Phi::Manipulation, &tau_ns, &jac, &w_fra, &w_fmr, &tau_t, &lim);
    let jf = matvec_jt(&jac, &f_fra);
    for i in 0..7 {
        c(close(man[i], tau_ns[i] + jf[i], &format!("manipulation blend joint {}", i + 1)))?;
    }
    let man2 = leader_torque(Phi::Manipulation, &tau_ns, &jac, &w_fra, &Wrench6::zero(), &JointVector7::zeros(), &lim);
    c(check(man == man2, || "navigation inputs leak into manipulation torque".into()))?;
    let nav0 = leader_torque(Phi::Navigation, &tau_ns, &jac, &w_fra, &Wrench6::zero(), &JointVector7::zeros(), &lim);
    c(check(nav0 == tau_ns, || "navigation torque with no cue must equal the null-space torque".into()))?;

    // kinematics examples
    let planar = planar_chain();
    let p0 = planar.forward_kinematics(&JointVector7::zeros()).unwrap().position;
    c(check((p0 - Vector3::new(2.0, 0.0, 0.0)).amax() <= 1e-9, || format!("planar FK at zero: {p0}")))?;
    let p1 = planar.forward_kinematics(&joint_vector([0.0, PI / 2.0, 0.0, 0.0, 0.0, 0.0, 0.0])).unwrap().position;
    c(check((p1 - Vector3::new(1.0, 1.0, 0.0)).amax() <= 1e-9, || format!("planar FK with elbow: {p1}")))?;
    c(close(planar.jacobian(&JointVector7::zeros()).unwrap()[(1, 0)], 2.0, "planar dy/dq1"))?;
    let file: ChainFile = toml::from_str(KinematicChain::panda_toml()).unwrap();
    let t = dh_fk(&file, &teleop_core::model::joint_array(&q));
    let ee = chain.end_effector(&q).unwrap();
    let dp = (ee.translation.vector - t.fixed_view::<3, 1>(0, 3)).amax();
    let dr = (ee.rotation.to_rotation_matrix().matrix() - t.fixed_view::<3, 3>(0, 0)).amax();
    c(check(dp <= 1e-9 && dr <= 1e-9, || format!("home FK differs from matrix oracle: {dp:e} m, {dr:e}")))?;
    let orth = SMatrix::<f64, 6, 7>::from_fn(|r, col| if r == col { 1.0 } else { 0.0 });
    c(check((pinv(&orth) - orth.transpose()).amax() <= 1e-12, || "pinv of orthonormal rows must be the transpose".into()))?;

    let took = started.elapsed().as_secs_f64();
    check(took < 1.0, || format!("took {took:.3} s"))?;
    Ok(format!("{n} checks within 1e-9 in {took:.3} s"))
}

// ---------------------------------------------------------------- kinematics

fn random_q(chain: &KinematicChain, rng: &mut ChaCha8Rng) -> JointVector7 {
    JointVector7::from_fn(|i, _| {
        let (lo, hi) = (chain.lower()[i], chain.upper()[i]);
        // stay a little inside the limits so finite differences remain legal
        let m = 0.01 * (hi - lo);
        rng.random_range(lo + m..hi - m)
    })
}

fn null_space_property() -> Result<String, String> {
    let chain = KinematicChain::panda();
    let gains = ControllerGains::from_config(&ScenarioConfig::builtin_default().gains).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let q = random_q(&chain, &mut rng);
        let qdot = JointVector7::from_fn(|_, _| rng.random_range(-2.0..2.0));
        let q_ns = random_q(&chain, &mut rng);
        let tau = nullspace_torque(&chain, &q, &qdot, Some(&q_ns), &gains);
        let leak = (oracle_pinv_jt(&chain.jacobian(&q).unwrap()) * tau).norm();
        let ratio = leak / tau.norm().max(f64::MIN_POSITIVE);
        worst = worst.max(ratio);
    }
    check(worst <= 1e-9, || format!("worst |pinv(J^T) tau| / |tau| = {worst:e}"))?;
    Ok(format!("100 configurations, worst ratio {worst:.2e}"))
}

fn jacobian_fd() -> Result<String, String> {
    let chain = KinematicChain::panda();
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let h = 1e-6;
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let q = random_q(&chain, &mut rng);
        let j = chain.jacobian(&q).unwrap();
        for k in 0..7 {
            let mut qp = q;
            let mut qm = q;
            qp[k] += h;
            qm[k] -= h;
            let tp = chain.end_effector(&qp).unwrap();
            let tm = chain.end_effector(&qm).unwrap();
            let v = (tp.translation.vector - tm.translation.vector) / (2.0 * h);
            // world-frame angular velocity from dR R^T
            let rp = tp.rotation.to_rotation_matrix();
            let rm = tm.rotation.to_rotation_matrix();
            let r0 = chain.end_effector(&q).unwrap().rotation.to_rotation_matrix();
            let s = (rp.matrix() - rm.matrix()) / (2.0 * h) * r0.matrix().transpose();
            let w = Vector3::new(s[(2, 1)] - s[(1, 2)], s[(0, 2)] - s[(2, 0)], s[(1, 0)] - s[(0, 1)]) / 2.0;
            let fd = Vector6::new(v.x, v.y, v.z, w.x, w.y, w.z);
            let col: Vector6<f64> = j.column(k).into();
            let rel = (fd - col).norm() / col.norm().max(1e-12);
            worst = worst.max(rel);
        }
    }
    check(worst <= 1e-5, || format!("worst column relative error {worst:e}"))?;
    Ok(format!("700 columns, worst relative error {worst:.2e}"))
}

// ---------------------------------------------------------------- planners

/// a + d sqrt(2) < a' + d' sqrt(2), decided in integers.
fn cost_less(a: (i64, i64), b: (i64, i64)) -> bool {
    let x = a.0 - b.0;
    let y = b.1 - a.1;
    // is x < y sqrt(2)?
    match (x >= 0, y >= 0) {
        (true, true) => x * x < 2 * y * y,
        (false, false) => x * x > 2 * y * y,
        (true, false) => false,
        (false, true) => true,
    }
}

/// Relaxes every edge until nothing improves, with exact costs.
fn exhaustive_cost(v: &GridView, s: Cell, g: Cell) -> Option<(i64, i64)> {
    let (w, h) = (v.width(), v.height());
    let mut d: Vec<Option<(i64, i64)>> = vec![None; w * h];
    d[s.y * w + s.x] = Some((0, 0));
    loop {
        let mut changed = false;
        for y in 0..h {
            for x in 0..w {
                let Some(here) = d[y * w + x] else { continue };
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                        if (dx, dy) == (0, 0) || nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                            continue;
                        }
                        if v.is_blocked(Cell::new(nx as usize, ny as usize)) {
                            continue;
                        }
                        let cand = if dx != 0 && dy != 0 { (here.0, here.1 + 1) } else { (here.0 + 1, here.1) };
                        let slot = &mut d[ny as usize * w + nx as usize];
                        if slot.is_none_or(|cur| cost_less(cand, cur)) {
                            *slot = Some(cand);
                            changed = true;
                        }
                    }
                }
            }
        }
        if !changed {
            return d[g.y * w + g.x];
        }
    }
}

fn dijkstra_oracle() -> Result<(usize, usize), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let mut reachable = 0;
    for i in 0..100 {
        let blocked: Vec<bool> = (0..64).map(|_| rng.random_bool(0.4)).collect();
        let mut v = GridView::from_blocked(8, 8, 0.1, Pose2D::default(), blocked);
        let s = Cell::new(rng.random_range(0..8), rng.random_range(0..8));
        let g = Cell::new(rng.random_range(0..8), rng.random_range(0..8));
        v.set_blocked(s, false);
        v.set_blocked(g, false);
        match (plan_cells(&v, s, g), exhaustive_cost(&v, s, g)) {
            (Ok((path, cost)), Some(o)) => {
                let want = PathCost {
                    axial: o.0 as u32,
                    diagonal: o.1 as u32,
                };
                check(cost == want, || format!("grid {i}: planner {cost:?}, exhaustive {want:?}"))?;
                // the returned path must really cost what it claims
                let (mut ax, mut dg) = (0u32, 0u32);
                for p in path.windows(2) {
                    let dx = p[0].x.abs_diff(p[1].x);
                    let dy = p[0].y.abs_diff(p[1].y);
                    check(dx <= 1 && dy <= 1 && !v.is_blocked(p[1]), || format!("grid {i}: bad step"))?;
                    if dx + dy == 2 {
                        dg += 1
                    } else {
                        ax += 1
                    }
                }
                check(PathCost { axial: ax, diagonal: dg } == cost, || format!("grid {i}: path cost mismatch"))?;
                reachable += 1;
            }
            (Err(_), None) => {}
            (a, b) => return Err(format!("grid {i}: planner {a:?}, exhaustive {b:?}")),
        }
    }
    Ok((100, reachable))
}

struct DwaOracle<'a> {
    grid: &'a OccupancyGrid,
    occupied: Vec<Cell>,
    cap: f64,
    cache: HashMap<Cell, f64>,
}

impl DwaOracle<'_> {
    /// Distance from a cell center to the nearest obstacle square, by brute force.
    fn cell_distance(&mut self, c: Cell) -> f64 {
        if let Some(d) = self.cache.get(&c) {
            return *d;
        }
        let res = self.grid.resolution();
        let d = self
            .occupied
            .iter()
            .map(|o| cell_box_distance(res, c.x as i64, c.y as i64, o.x as i64, o.y as i64))
            .fold(self.cap, f64::min);
        self.cache.insert(c, d);
        d
    }

    fn clearance(&mut self, poses: &[Pose2D]) -> Option<f64> {
        let half = self.grid.resolution() * SQRT_2 * 0.5;
        let mut best = f64::INFINITY;
        for p in poses {
            let c = self.grid.pose_to_grid(p).ok()?;
            best = best.min(self.cell_distance(c) - half);
        }
        Some(best.max(0.0))
    }
}

fn arc_point(path: &GlobalPath, from: usize, mut left: f64) -> (f64, f64) {
    let w = &path.waypoints;
    for i in from..w.len() - 1 {
        let seg = (w[i + 1].x - w[i].x).hypot(w[i + 1].y - w[i].y);
        if seg >= left && seg > 0.0 {
            let t = left / seg;
            return (w[i].x + t * (w[i + 1].x - w[i].x), w[i].y + t * (w[i + 1].y - w[i].y));
        }
        left -= seg;
    }
    (w[w.len() - 1].x, w[w.len() - 1].y)
}

fn closest(path: &GlobalPath, x: f64, y: f64) -> usize {
    let d = |p: &Pose2D| (p.x - x).powi(2) + (p.y - y).powi(2);
    // first index among the minima
    let m = path.waypoints.iter().map(d).fold(f64::INFINITY, f64::min);
    path.waypoints.iter().position(|p| d(p) == m).unwrap()
}

/// Expected command: argmax of the re-scored candidates, ties to the smallest
/// (|v_gamma|, v_x, v_gamma). `None` when nothing is feasible.
fn rescore(o: &mut DwaOracle, state: &BaseState, path: &GlobalPath, p: &DwaParams) -> (Option<BaseVelocity>, usize) {
    let here = closest(path, state.pose.x, state.pose.y);
    let remaining: f64 = path.waypoints[here..].windows(2).map(|w| (w[1].x - w[0].x).hypot(w[1].y - w[0].y)).sum();
    let mut scored = Vec::new();
    for cmd in candidate_commands(state, remaining, p) {
        let poses = rollout(&state.pose, &cmd, p);
        let Some(clear) = o.clearance(&poses) else { continue };
        if clear < p.footprint_radius {
            continue;
        }
        let end = poses[poses.len() - 1];
        let (cx, cy) = arc_point(path, closest(path, end.x, end.y), p.carrot_distance);
        let (dx, dy) = (cx - end.x, cy - end.y);
        let ang = if dx == 0.0 && dy == 0.0 { 0.0 } else { teleop_core::model::wrap_angle(dy.atan2(dx) - end.gamma) };
        let heading = 1.0 - ang.abs() / PI;
        let total = p.w_heading * heading
            + p.w_clearance * (clear.min(p.clearance_cap) / p.clearance_cap)
            + p.w_velocity * (cmd.v_x.abs() / BASE_SPEED_CAP);
        scored.push((total, cmd));
    }
    let Some(top) = scored.iter().map(|s| s.0).reduce(f64::max) else {
        return (None, 0);
    };
    let mut ties: Vec<BaseVelocity> = scored.iter().filter(|s| s.0 == top).map(|s| s.1).collect();
    ties.sort_by(|a, b| {
        (a.v_gamma.abs(), a.v_x, a.v_gamma)
            .partial_cmp(&(b.v_gamma.abs(), b.v_x, b.v_gamma))
            .unwrap()
    });
    (Some(ties[0]), ties.len())
}

fn random_world(rng: &mut ChaCha8Rng) -> OccupancyGrid {
    let (w, h) = (120usize, 80usize);
    let mut cells = vec![vec!['.'; w]; h];
    for _ in 0..8 {
        let (x0, y0) = (rng.random_range(20..100), rng.random_range(5..75));
        let (bw, bh) = (rng.random_range(2..12), rng.random_range(2..12));
        for row in cells.iter_mut().skip(y0).take(bh) {
            for c in row.iter_mut().skip(x0).take(bw) {
                *c = '#';
            }
        }
    }
    for (y, row) in cells.iter_mut().enumerate() {
        for (x, c) in row.iter_mut().enumerate() {
            if x == 0 || y == 0 || x == w - 1 || y == h - 1 {
                *c = '#';
            }
        }
    }
    let text: String = cells.iter().rev().map(|r| r.iter().collect::<String>() + "\n").collect();
    OccupancyGrid::parse(&text, 0.05, Pose2D::default()).unwrap()
}

fn dwa_oracle() -> Result<(usize, usize, usize), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let p = DwaParams::default();
    let (mut states, mut blocked, mut tied) = (0, 0, 0);
    while states < 100 {
        let grid = random_world(&mut rng);
        let mut field = DistanceField::new(&grid, p.field_cap(grid.resolution()));
        let occupied = grid.occupied_cells();
        for c in &occupied {
            field.insert(*c);
        }
        let Ok(path) = plan_global(&GridView::visible(&grid), Pose2D::new(0.3, 2.0, 0.0), Pose2D::new(5.7, 2.0, 0.0)) else {
            continue;
        };
        let mut oracle = DwaOracle {
            grid: &grid,
            occupied,
            cap: field.cap(),
            cache: HashMap::new(),
        };
        for _ in 0..10 {
            let w = path.waypoints[rng.random_range(0..path.waypoints.len())];
            let pose = Pose2D::new(
                w.x + rng.random_range(-0.15..0.15),
                w.y + rng.random_range(-0.15..0.15),
                w.gamma + rng.random_range(-0.6..0.6),
            );
            if grid.pose_to_grid(&pose).map_or(true, |c| grid.class(c).is_occupied()) {
                continue;
            }
            let state = BaseState {
                pose,
                velocity: BaseVelocity::new(rng.random_range(0.0..0.5), rng.random_range(-1.0..1.0)),
            };
            let got = dwa_step(&state, &grid, &field, &path, &p).map_err(|e| e.to_string())?;
            let (want, ties) = rescore(&mut oracle, &state, &path, &p);
            match want {
                Some(cmd) => {
                    check(!got.blocked && got.command == cmd, || {
                        format!("state {states}: planner {:?}, oracle {cmd:?}", got.command)
                    })?;
                    if ties > 1 {
                        tied += 1;
                    }
                    states += 1;
                }
                None => {
                    // checked too, but only states with a choice to make count
                    check(got.blocked && got.command == BaseVelocity::ZERO, || format!("oracle sees no feasible command, planner chose {:?}", got.command))?;
                    blocked += 1;
                }
            }
            if states == 100 {
                break;
            }
        }
    }
    Ok((states, blocked, tied))
}

fn planner_oracles() -> Result<String, String> {
    let (grids, reachable) = dijkstra_oracle()?;
    let (states, blocked, tied) = dwa_oracle()?;
    Ok(format!(
        "Dijkstra equals exhaustive cost on {grids} grids ({reachable} reachable); DWA equals re-scored argmax on {states} states ({tied} with tied scores; {blocked} fully blocked states also agree)"
    ))
}

// ---------------------------------------------------------------- boundary

fn boundary_property() -> Result<String, String> {
    let cfg = ScenarioConfig::builtin_default();
    let gains = ControllerGains::from_config(&cfg.gains).unwrap();
    let vb = VirtualBoundary::new(0.05, 0.4).unwrap();
    let mut runner = TestRunner::new(PropConfig {
        cases: 10_000,
        failure_persistence: None,
        ..PropConfig::default()
    });
    let strategy = (-0.8f64..0.8, -PI..PI, any::<bool>());
    let counts = Mutex::new([0u32; 3]);
    runner
        .run(&strategy, |(d, dg, near)| {
            let o = base_velocity_from_offset(d, dg, &vb, &gains, near);
            prop_assert!(o.velocity.v_x.abs() <= 0.5, "|v_x| = {} at d = {d}", o.velocity.v_x);
            let mut k = counts.lock().unwrap();
            if d.abs() > 0.4 {
                k[2] += 1;
                prop_assert!(o.home_return && o.velocity == BaseVelocity::ZERO, "d = {d} beyond the boundary");
            } else {
                prop_assert!(!o.home_return, "home return raised at d = {d}");
                if d.abs() < 0.05 {
                    k[0] += 1;
                    prop_assert_eq!(o.velocity.v_x, 0.0);
                } else {
                    k[1] += 1;
                    prop_assert!(o.velocity.v_x != 0.0 && o.velocity.v_x.signum() == d.signum());
                }
            }
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    let k = counts.into_inner().unwrap();
    Ok(format!("10000 samples: {} inside deadzone, {} active, {} beyond", k[0], k[1], k[2]))
}

// ---------------------------------------------------------------- end to end

/// Switch-safety findings from one record's rows.
fn switch_violations(r: &TrialRecord, cfg: &ScenarioConfig, home_pose: &Isometry3<f64>) -> Vec<String> {
    let mut out = Vec::new();
    let sw = &cfg.switching;
    let home_q = cfg.leader_home();
    let mut prev: Option<&teleop_core::harness::TickRow> = None;
    let mut homed_in_switch = false;
    for row in &r.rows {
        if row.mode != ControlMode::Navigation {
            if !row.base_cmd.is_zero() {
                out.push(format!("tick {}: base command {:?} in {}", row.tick, row.base_cmd, row.mode.as_str()));
            }
            if let Some(p) = prev {
                if p.mode != ControlMode::Navigation && p.base != row.base {
                    out.push(format!("tick {}: base moved in {}", row.tick, row.mode.as_str()));
                }
            }
        }
        if row.mode == ControlMode::SwitchingToManipulation {
            homed_in_switch |= row.home;
        }
        let entering = row.mode == ControlMode::Manipulation && prev.is_some_and(|p| p.mode != ControlMode::Manipulation);
        if entering {
            let p = prev.unwrap();
            if p.mode != ControlMode::SwitchingToManipulation {
                out.push(format!("tick {}: manipulation entered from {}", row.tick, p.mode.as_str()));
            }
            if !homed_in_switch {
                out.push(format!("tick {}: manipulation entered without homing", row.tick));
            }
            let lp = p.leader_pose;
            let dp = (Vector3::new(lp[0], lp[1], lp[2]) - home_pose.translation.vector).norm();
            if dp > 0.01 {
                out.push(format!("tick {}: leader {dp:.4} m from home at entry", row.tick));
            }
            let align = (row.follower_q - home_q).amax();
            if align > sw.align_eps_rad + sw.home_eps_rad {
                out.push(format!("tick {}: follower {align:.4} rad from the homed leader at entry", row.tick));
            }
            homed_in_switch = false;
        }
        prev = Some(row);
    }
    out
}

/// P(X >= wins), X ~ Binomial(n, 1/2), summed term by term.
fn binomial_tail(wins: u64, n: u64) -> f64 {
    let mut term = 0.5f64.powi(n as i32); // C(n, 0) / 2^n
    let mut tail = if wins == 0 { term } else { 0.0 };
    for k in 1..=n {
        term = term * (n - k + 1) as f64 / k as f64;
        if k >= wins {
            tail += term;
        }
    }
    tail
}

struct Paired {
    mean_a: f64,
    mean_b: f64,
    wins: u64,
    losses: u64,
    p: f64,
}

fn paired(trials: &[TrialSummary], a: Condition, b: Condition, f: fn(&TrialSummary) -> f64) -> Paired {
    let mut xs = Vec::new();
    for t in trials.iter().filter(|t| t.condition == a) {
        if let Some(u) = trials.iter().find(|u| u.condition == b && u.seed == t.seed) {
            xs.push((f(t), f(u)));
        }
    }
    let n = xs.len() as f64;
    let wins = xs.iter().filter(|(x, y)| x < y).count() as u64;
    let losses = xs.iter().filter(|(x, y)| x > y).count() as u64;
    Paired {
        mean_a: xs.iter().map(|p| p.0).sum::<f64>() / n,
        mean_b: xs.iter().map(|p| p.1).sum::<f64>() / n,
        wins,
        losses,
        p: binomial_tail(wins, wins + losses),
    }
}

fn trial_hash(condition: Condition, seed: u64) -> String {
    run_trial(&Scenario::builtin_default(), condition, seed, None, RecordLevel::Summary)
        .expect("trial runs")
        .summary
        .record_hash
}

fn determinism() -> Result<String, String> {
    let (c, seed) = (Condition::DistractedCues, 5);
    let a = trial_hash(c, seed);
    let b = trial_hash(c, seed);
    check(a == b, || format!("in-process hashes differ: {a} vs {b}"))?;
    let exe = std::env::current_exe().map_err(|e| e.to_string())?;
    let out = std::process::Command::new(exe)
        .args([HASH_FLAG, &c.number().to_string(), &seed.to_string()])
        .output()
        .map_err(|e| e.to_string())?;
    check(out.status.success(), || format!("child failed: {}", String::from_utf8_lossy(&out.stderr)))?;
    let child = String::from_utf8_lossy(&out.stdout).trim().to_string();
    check(child == a, || format!("child process hash {child} vs {a}"))?;
    Ok(format!("condition 3 seed 5 hashed {}… three times, once in a separate process", &a[..12]))
}

fn performance() -> Result<String, String> {
    let r = run_trial(&Scenario::builtin_default(), Condition::Cues, 1, None, RecordLevel::Summary).map_err(|e| e.to_string())?;
    let s = r.summary;
    check(s.ticks_per_s >= 1000.0, || format!("{:.0} ticks/s", s.ticks_per_s))?;
    Ok(format!(
        "{} ticks in {:.2} s: {:.0} ticks/s, {:.1}x real time",
        s.ticks,
        s.wall_time_s,
        s.ticks_per_s,
        s.ticks_per_s / 1000.0
    ))
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().collect();
    if let Some(i) = args.iter().position(|a| a == HASH_FLAG) {
        let c = Condition::from_number(args[i + 1].parse().unwrap()).unwrap();
        println!("{}", trial_hash(c, args[i + 2].parse().unwrap()));
        return ExitCode::SUCCESS;
    }
    let mut report = Report { lines: Vec::new() };
    report.add("control-law fidelity", control_law_fidelity());
    report.add("null-space property", null_space_property());
    report.add("jacobian finite differences", jacobian_fd());
    report.add("planner oracles", planner_oracles());
    report.add("virtual boundary", boundary_property());
    report.add("determinism", determinism());
    report.add("real-time performance", performance());

    // one batch feeds the switch-safety and condition comparisons
    let scenario = Scenario::builtin_default();
    let cfg = &scenario.config;
    let home_pose = KinematicChain::panda().end_effector(&cfg.leader_home()).unwrap();
    let seeds: Vec<u64> = (1..=SEEDS).collect();
    let conditions = [Condition::Cues, Condition::NoCues, Condition::DistractedCues];
    let violations = Mutex::new(Vec::new());
    let checked = Mutex::new((0usize, 0usize));
    let started = Instant::now();
    let batch = run_batch_with(&scenario, &conditions, &seeds, None, RecordLevel::Full, |r| {
        let v = switch_violations(r, cfg, &home_pose);
        let entries = r.rows.windows(2).filter(|w| w[1].mode == ControlMode::Manipulation && w[0].mode != w[1].mode).count();
        let mut k = checked.lock().unwrap();
        k.0 += 1;
        k.1 += entries;
        violations.lock().unwrap().extend(v.into_iter().map(|s| format!("c{} s{}: {s}", r.summary.condition.number(), r.summary.seed)));
    });
    let batch_s = started.elapsed().as_secs_f64();
    match batch {
        Err(e) => {
            for name in ["switch safety", "deviation c1 < c2", "manipulation time c1 < c2", "distracted c3 <= c2"] {
                report.add(name, Err(format!("batch failed: {e}")));
            }
        }
        Ok(b) => {
            let (trials, entries) = *checked.lock().unwrap();
            let v = violations.into_inner().unwrap();
            report.add(
                "switch safety",
                if trials < 50 {
                    Err(format!("only {trials} trials"))
                } else if let Some(first) = v.first() {
                    Err(format!("{} violations, first: {first}", v.len()))
                } else {
                    Ok(format!("{trials} trials, {entries} manipulation entries, base still outside navigation"))
                },
            );
            let t = &b.trials;
            let done = t.iter().filter(|s| s.outcome == Some(Outcome::Completed)).count();
            println!("       batch: {} trials ({done} completed) in {batch_s:.1} s", t.len());
            let sign = |name: &str, p: Paired, unit: &str| {
                let detail = format!(
                    "{:.4} vs {:.4} {unit}, {} of {} pairs lower, p = {:.2e}",
                    p.mean_a,
                    p.mean_b,
                    p.wins,
                    p.wins + p.losses,
                    p.p
                );
                let lib = b.tests.iter().find(|s| s.metric == name && s.a == Condition::Cues && s.b == Condition::NoCues);
                if lib.is_none_or(|s| (s.p_value - p.p).abs() > 1e-12 * p.p.max(1e-300)) {
                    return Err(format!("{detail}; summary reports a different p ({:?})", lib.map(|s| s.p_value)));
                }
                if p.mean_a < p.mean_b && p.p < 0.05 {
                    Ok(detail)
                } else {
                    Err(detail)
                }
            };
            report.add(
                "deviation c1 < c2",
                sign("mae_y", paired(t, Condition::Cues, Condition::NoCues, |s| s.metrics.mae_y), "m"),
            );
            report.add(
                "manipulation time c1 < c2",
                sign("manip_time", paired(t, Condition::Cues, Condition::NoCues, |s| s.metrics.manip_time), "s"),
            );
            let d = paired(t, Condition::DistractedCues, Condition::NoCues, |s| s.metrics.mae_y);
            let detail = format!("mae_y {:.4} vs {:.4} m over {SEEDS} seeds", d.mean_a, d.mean_b);
            report.add("distracted c3 <= c2", if d.mean_a <= d.mean_b { Ok(detail) } else { Err(detail) });
        }
    }

    let failed = report.lines.iter().filter(|l| !l.0).count();
    println!("acceptance: {} of {} criteria passed", report.lines.len() - failed, report.lines.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
