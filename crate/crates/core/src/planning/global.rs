//! Dijkstra over an 8-connected grid with exact path costs.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use serde::Serialize;
use thiserror::Error;

use crate::grid::{Cell, DistanceField, OccupancyGrid};
use crate::model::Pose2D;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlanError {
    #[error("no path from {start} to {goal}")]
    NoPath { start: Cell, goal: Cell },
    #[error("{which} pose ({x:.3}, {y:.3}) is outside the grid")]
    OutOfBounds { which: &'static str, x: f64, y: f64 },
    #[error("start cell {0} is blocked")]
    StartBlocked(Cell),
    #[error("trajectory has {len} samples, index {index} requested")]
    InsufficientHorizon { len: usize, index: usize },
    #[error("global path is empty")]
    EmptyPath,
}

/// Path cost `axial + diagonal * sqrt(2)`, compared exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize)]
pub struct PathCost {
    pub axial: u32,
    pub diagonal: u32,
}

impl PathCost {
    pub const ZERO: PathCost = PathCost { axial: 0, diagonal: 0 };

    pub fn value(&self) -> f64 {
        self.axial as f64 + self.diagonal as f64 * std::f64::consts::SQRT_2
    }

    fn step(self, diagonal: bool) -> Self {
        if diagonal {
            Self {
                axial: self.axial,
                diagonal: self.diagonal + 1,
            }
        } else {
            Self {
                axial: self.axial + 1,
                diagonal: self.diagonal,
            }
        }
    }
}

impl Ord for PathCost {
    fn cmp(&self, other: &Self) -> Ordering {
        // sign of (a1 - a2) + (d1 - d2) * sqrt(2)
        let x = self.axial as i64 - other.axial as i64;
        let y = self.diagonal as i64 - other.diagonal as i64;
        match (x.cmp(&0), y.cmp(&0)) {
            (Ordering::Equal, o) | (o, Ordering::Equal) => o,
            (a, b) if a == b => a,
            // opposite signs: compare |x| with |y| * sqrt(2) via squares
            (a, _) => {
                let lhs = x * x;
                let rhs = 2 * y * y;
                if lhs > rhs {
                    a
                } else {
                    a.reverse()
                }
            }
        }
    }
}

impl PartialOrd for PathCost {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Boolean obstacle view of a grid, in the grid's frame.
#[derive(Debug, Clone, PartialEq)]
pub struct GridView {
    width: usize,
    height: usize,
    resolution: f64,
    origin: Pose2D,
    blocked: Vec<bool>,
}

impl GridView {
    /// `blocked` is row-major with row 0 at the lowest y.
    pub fn from_blocked(width: usize, height: usize, resolution: f64, origin: Pose2D, blocked: Vec<bool>) -> Self {
        assert_eq!(blocked.len(), width * height, "blocked mask size");
        Self {
            width,
            height,
            resolution,
            origin,
            blocked,
        }
    }

    /// Cells the planner can see as obstacles (known, plus discovered semi-known).
    pub fn visible(grid: &OccupancyGrid) -> Self {
        let blocked = (0..grid.len()).map(|i| grid.planner_sees_obstacle(grid.cell_at(i))).collect();
        Self::from_blocked(grid.width(), grid.height(), grid.resolution(), grid.origin(), blocked)
    }

    /// Cells whose center lies closer than `radius` to an obstacle in `field`.
    pub fn inflated(grid: &OccupancyGrid, field: &DistanceField, radius: f64) -> Self {
        let blocked = (0..grid.len()).map(|i| field.get(grid.cell_at(i)) < radius).collect();
        Self::from_blocked(grid.width(), grid.height(), grid.resolution(), grid.origin(), blocked)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn is_blocked(&self, cell: Cell) -> bool {
        self.blocked[cell.y * self.width + cell.x]
    }

    pub fn set_blocked(&mut self, cell: Cell, blocked: bool) {
        self.blocked[cell.y * self.width + cell.x] = blocked;
    }

    pub fn world_to_cell(&self, x: f64, y: f64) -> Option<Cell> {
        let (lx, ly) = self.origin.to_body(x, y);
        let (gx, gy) = ((lx / self.resolution).floor(), (ly / self.resolution).floor());
        if gx >= 0.0 && gy >= 0.0 && (gx as usize) < self.width && (gy as usize) < self.height {
            Some(Cell::new(gx as usize, gy as usize))
        } else {
            None
        }
    }

    pub fn cell_center(&self, cell: Cell) -> (f64, f64) {
        self.origin.to_world(
            (cell.x as f64 + 0.5) * self.resolution,
            (cell.y as f64 + 0.5) * self.resolution,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GlobalPath {
    pub cells: Vec<Cell>,
    /// Cell centers with heading along the next segment.
    pub waypoints: Vec<Pose2D>,
    /// Metric length in meters.
    pub length: f64,
}

impl GlobalPath {
    pub fn from_cells(view: &GridView, cells: Vec<Cell>, final_heading: Option<f64>) -> Self {
        let pts: Vec<(f64, f64)> = cells.iter().map(|c| view.cell_center(*c)).collect();
        let mut waypoints = Vec::with_capacity(pts.len());
        let mut length = 0.0;
        for i in 0..pts.len() {
            let gamma = if i + 1 < pts.len() {
                (pts[i + 1].1 - pts[i].1).atan2(pts[i + 1].0 - pts[i].0)
            } else if let Some(h) = final_heading {
                h
            } else if i > 0 {
                waypoints.last().map(|p: &Pose2D| p.gamma).unwrap_or(0.0)
            } else {
                0.0
            };
            if i > 0 {
                length += (pts[i].0 - pts[i - 1].0).hypot(pts[i].1 - pts[i - 1].1);
            }
            waypoints.push(Pose2D::new(pts[i].0, pts[i].1, gamma));
        }
        Self { cells, waypoints, length }
    }

    pub fn is_empty(&self) -> bool {
        self.waypoints.is_empty()
    }
}

const NEIGHBORS: [(i64, i64); 8] = [(1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (1, -1), (-1, 1), (-1, -1)];

/// Minimum-cost cell path. Ties between equal-cost frontier cells are broken
/// by (row, column).
pub fn plan_cells(view: &GridView, start: Cell, goal: Cell) -> Result<(Vec<Cell>, PathCost), PlanError> {
    if view.is_blocked(start) {
        return Err(PlanError::StartBlocked(start));
    }
    if view.is_blocked(goal) {
        return Err(PlanError::NoPath { start, goal });
    }
    let n = view.width * view.height;
    let idx = |c: Cell| c.y * view.width + c.x;
    let mut best: Vec<Option<PathCost>> = vec![None; n];
    let mut parent: Vec<usize> = vec![usize::MAX; n];
    let mut done = vec![false; n];
    let mut heap = BinaryHeap::new();
    best[idx(start)] = Some(PathCost::ZERO);
    heap.push(Reverse((PathCost::ZERO, start.y, start.x)));
    while let Some(Reverse((cost, y, x))) = heap.pop() {
        let i = y * view.width + x;
        if done[i] {
            continue;
        }
        done[i] = true;
        if x == goal.x && y == goal.y {
            let mut cells = vec![goal];
            let mut cur = i;
            while parent[cur] != usize::MAX {
                cur = parent[cur];
                cells.push(Cell::new(cur % view.width, cur / view.width));
            }
            cells.reverse();
            return Ok((cells, cost));
        }
        for (dx, dy) in NEIGHBORS {
            let (nx, ny) = (x as i64 + dx, y as i64 + dy);
            if nx < 0 || ny < 0 || nx >= view.width as i64 || ny >= view.height as i64 {
                continue;
            }
            let nc = Cell::new(nx as usize, ny as usize);
            let j = idx(nc);
            if done[j] || view.blocked[j] {
                continue;
            }
            let nc_cost = cost.step(dx != 0 && dy != 0);
            if best[j].is_none_or(|b| nc_cost < b) {
                best[j] = Some(nc_cost);
                parent[j] = i;
                heap.push(Reverse((nc_cost, nc.y, nc.x)));
            }
        }
    }
    Err(PlanError::NoPath { start, goal })
}

pub fn plan_global(view: &GridView, start: Pose2D, goal: Pose2D) -> Result<GlobalPath, PlanError> {
    let s = view.world_to_cell(start.x, start.y).ok_or(PlanError::OutOfBounds {
        which: "start",
        x: start.x,
        y: start.y,
    })?;
    let g = view.world_to_cell(goal.x, goal.y).ok_or(PlanError::OutOfBounds {
        which: "goal",
        x: goal.x,
        y: goal.y,
    })?;
    let (cells, _) = plan_cells(view, s, g)?;
    Ok(GlobalPath::from_cells(view, cells, Some(goal.gamma)))
}

/// 8-connected cell line from `a` to `b`, both included.
pub fn bresenham(a: Cell, b: Cell) -> Vec<Cell> {
    let (mut x, mut y) = (a.x as i64, a.y as i64);
    let (x1, y1) = (b.x as i64, b.y as i64);
    let dx = (x1 - x).abs();
    let dy = -(y1 - y).abs();
    let sx = if x < x1 { 1 } else { -1 };
    let sy = if y < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    let mut out = vec![a];
    while x != x1 || y != y1 {
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
        out.push(Cell::new(x as usize, y as usize));
    }
    out
}
