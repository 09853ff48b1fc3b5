//! Dynamic-window local planner.
//!
//! Every plan samples a grid of (v, w) commands reachable from the current
//! velocity, rolls each out with the vehicle model, rejects rollouts that come
//! closer than the footprint radius to a visible obstacle and scores the rest
//! on heading toward the global path, clearance and speed.

use std::f64::consts::PI;

use serde::Serialize;

use crate::grid::{DistanceField, OccupancyGrid};
use crate::model::{wrap_angle, BaseVelocity, Pose2D};
use crate::planning::global::{GlobalPath, PlanError};
use crate::scenario::{PlannerConfig, BASE_SPEED_CAP};
use crate::vehicle::Bicycle;

#[derive(Debug, Clone, PartialEq)]
pub struct DwaParams {
    pub v_min: f64,
    pub v_max: f64,
    pub w_max: f64,
    pub accel_lin: f64,
    pub accel_ang: f64,
    pub window_time: f64,
    pub v_samples: usize,
    pub w_samples: usize,
    pub dt_plan: f64,
    pub horizon: f64,
    pub w_heading: f64,
    pub w_clearance: f64,
    pub w_velocity: f64,
    pub clearance_cap: f64,
    pub footprint_radius: f64,
    pub carrot_distance: f64,
    pub goal_slowdown: f64,
    pub vehicle: Bicycle,
}

impl DwaParams {
    pub fn from_config(p: &PlannerConfig, vehicle: Bicycle) -> Self {
        Self {
            v_min: p.v_min_mps,
            v_max: p.v_max_mps.min(BASE_SPEED_CAP),
            w_max: p.w_max_radps,
            accel_lin: p.accel_lin_mps2,
            accel_ang: p.accel_ang_radps2,
            window_time: p.window_time_s,
            v_samples: p.v_samples,
            w_samples: p.w_samples,
            dt_plan: p.dt_plan_s,
            horizon: p.horizon_s,
            w_heading: p.w_heading,
            w_clearance: p.w_clearance,
            w_velocity: p.w_velocity,
            clearance_cap: p.clearance_cap_m,
            footprint_radius: p.footprint_radius_m,
            carrot_distance: p.carrot_distance_m,
            goal_slowdown: p.goal_slowdown_per_s,
            vehicle,
        }
    }

    /// Number of rollout poses including the start pose.
    pub fn samples(&self) -> usize {
        (self.horizon / self.dt_plan + 1e-9).floor() as usize + 1
    }

    /// Cap needed on a distance field so clearance scores are never truncated.
    pub fn field_cap(&self, resolution: f64) -> f64 {
        self.clearance_cap.max(self.footprint_radius) + resolution * 2.0
    }
}

impl Default for DwaParams {
    fn default() -> Self {
        Self::from_config(&PlannerConfig::default(), Bicycle::default())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct BaseState {
    pub pose: Pose2D,
    pub velocity: BaseVelocity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScoreTerms {
    pub heading: f64,
    pub clearance: f64,
    pub velocity: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LocalTrajectory {
    pub command: BaseVelocity,
    pub poses: Vec<Pose2D>,
    /// Smallest clearance along the rollout (m).
    pub min_clearance: f64,
    pub score: Option<ScoreTerms>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DwaResult {
    pub command: BaseVelocity,
    pub trajectory: LocalTrajectory,
    pub blocked: bool,
}

/// Sampled velocity window around the current velocity.
pub fn candidate_commands(state: &BaseState, remaining: f64, params: &DwaParams) -> Vec<BaseVelocity> {
    let dv = params.accel_lin * params.window_time;
    let dw = params.accel_ang * params.window_time;
    let v_top = params.v_max.min(params.goal_slowdown * remaining).max(params.v_min);
    let v_lo = (state.velocity.v_x - dv).clamp(params.v_min, v_top);
    let v_hi = (state.velocity.v_x + dv).clamp(params.v_min, v_top);
    let w_lo = (state.velocity.v_gamma - dw).clamp(-params.w_max, params.w_max);
    let w_hi = (state.velocity.v_gamma + dw).clamp(-params.w_max, params.w_max);
    let lerp = |lo: f64, hi: f64, i: usize, n: usize| {
        if i + 1 == n {
            hi
        } else {
            lo + (hi - lo) * i as f64 / (n - 1) as f64
        }
    };
    let mut out = Vec::with_capacity(params.v_samples * params.w_samples);
    for i in 0..params.v_samples {
        let v = lerp(v_lo, v_hi, i, params.v_samples);
        for k in 0..params.w_samples {
            out.push(BaseVelocity::new(v, lerp(w_lo, w_hi, k, params.w_samples)));
        }
    }
    out
}

/// Poses at `k * dt_plan` for `k = 0..samples` under a constant command.
pub fn rollout(start: &Pose2D, cmd: &BaseVelocity, params: &DwaParams) -> Vec<Pose2D> {
    let n = params.samples();
    let mut poses = Vec::with_capacity(n);
    let mut p = *start;
    poses.push(p);
    for _ in 1..n {
        p = params.vehicle.advance(&p, cmd, params.dt_plan);
        poses.push(p);
    }
    poses
}

/// Minimum clearance over the poses; `None` if any pose leaves the grid.
pub fn rollout_clearance(grid: &OccupancyGrid, field: &DistanceField, poses: &[Pose2D]) -> Option<f64> {
    let mut best = f64::INFINITY;
    for p in poses {
        let cell = grid.pose_to_grid(p).ok()?;
        best = best.min(field.get(cell) - field.half_diagonal());
    }
    Some(best.max(0.0))
}

/// Index of the waypoint nearest to `(x, y)`; first one wins on ties.
pub fn nearest_waypoint(path: &GlobalPath, x: f64, y: f64) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, w) in path.waypoints.iter().enumerate() {
        let d = (w.x - x).powi(2) + (w.y - y).powi(2);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// Point `distance` meters of arc past waypoint `from`, clamped to the end.
pub fn point_along(path: &GlobalPath, from: usize, distance: f64) -> (f64, f64) {
    let w = &path.waypoints;
    let mut left = distance;
    for i in from..w.len().saturating_sub(1) {
        let seg = (w[i + 1].x - w[i].x).hypot(w[i + 1].y - w[i].y);
        if seg >= left && seg > 0.0 {
            let t = left / seg;
            return (w[i].x + t * (w[i + 1].x - w[i].x), w[i].y + t * (w[i + 1].y - w[i].y));
        }
        left -= seg;
    }
    let last = w[w.len() - 1];
    (last.x, last.y)
}

/// Arc length from waypoint `from` to the path end.
pub fn remaining_length(path: &GlobalPath, from: usize) -> f64 {
    path.waypoints[from..]
        .windows(2)
        .map(|p| (p[1].x - p[0].x).hypot(p[1].y - p[0].y))
        .sum()
}

/// Heading alignment in [0, 1] of the rollout end toward the carrot point.
pub fn heading_score(end: &Pose2D, path: &GlobalPath, carrot_distance: f64) -> f64 {
    let i = nearest_waypoint(path, end.x, end.y);
    let (cx, cy) = point_along(path, i, carrot_distance);
    let (dx, dy) = (cx - end.x, cy - end.y);
    let angle = if dx == 0.0 && dy == 0.0 {
        0.0
    } else {
        wrap_angle(dy.atan2(dx) - end.gamma)
    };
    1.0 - angle.abs() / PI
}

/// Deterministic preference between two equally scored commands: lower
/// |v_gamma|, then lower v_x, then lower v_gamma.
pub fn prefer_on_tie(a: &BaseVelocity, b: &BaseVelocity) -> bool {
    let (aw, bw) = (a.v_gamma.abs(), b.v_gamma.abs());
    if aw != bw {
        return aw < bw;
    }
    if a.v_x != b.v_x {
        return a.v_x < b.v_x;
    }
    a.v_gamma < b.v_gamma
}

pub fn dwa_step(
    state: &BaseState,
    grid: &OccupancyGrid,
    field: &DistanceField,
    path: &GlobalPath,
    params: &DwaParams,
) -> Result<DwaResult, PlanError> {
    if path.is_empty() {
        return Err(PlanError::EmptyPath);
    }
    let here = nearest_waypoint(path, state.pose.x, state.pose.y);
    let remaining = remaining_length(path, here);
    let mut best: Option<LocalTrajectory> = None;
    for cmd in candidate_commands(state, remaining, params) {
        let poses = rollout(&state.pose, &cmd, params);
        let Some(clear) = rollout_clearance(grid, field, &poses) else {
            continue;
        };
        if clear < params.footprint_radius {
            continue;
        }
        let end = poses[poses.len() - 1];
        let heading = heading_score(&end, path, params.carrot_distance);
        let clearance = clear.min(params.clearance_cap) / params.clearance_cap;
        let velocity = cmd.v_x.abs() / BASE_SPEED_CAP;
        let total = params.w_heading * heading + params.w_clearance * clearance + params.w_velocity * velocity;
        let better = match &best {
            None => true,
            Some(b) => {
                let bt = b.score.map(|s| s.total).unwrap_or(f64::NEG_INFINITY);
                total > bt || (total == bt && prefer_on_tie(&cmd, &b.command))
            }
        };
        if better {
            best = Some(LocalTrajectory {
                command: cmd,
                poses,
                min_clearance: clear,
                score: Some(ScoreTerms {
                    heading,
                    clearance,
                    velocity,
                    total,
                }),
            });
        }
    }
    Ok(match best {
        Some(t) => DwaResult {
            command: t.command,
            trajectory: t,
            blocked: false,
        },
        None => {
            let poses = rollout(&state.pose, &BaseVelocity::ZERO, params);
            DwaResult {
                command: BaseVelocity::ZERO,
                trajectory: LocalTrajectory {
                    command: BaseVelocity::ZERO,
                    min_clearance: rollout_clearance(grid, field, &poses).unwrap_or(0.0),
                    poses,
                    score: None,
                },
                blocked: true,
            }
        }
    })
}

/// The `k`-th rollout pose.
pub fn lookahead_pose(traj: &LocalTrajectory, k: usize) -> Result<Pose2D, PlanError> {
    traj.poses.get(k).copied().ok_or(PlanError::InsufficientHorizon {
        len: traj.poses.len(),
        index: k,
    })
}
