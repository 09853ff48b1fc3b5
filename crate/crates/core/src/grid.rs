//! Occupancy grid with per-cell obstacle class and lidar discovery flags,
//! plus the obstacle distance field used by planners and collision checks.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::Pose2D;

/// Obstacle class of a cell.
///
/// * `Known`: in the prior map and visible to lidar.
/// * `SemiKnown`: absent from the prior map, visible to lidar when in range.
/// * `Unknown`: absent from the map and invisible to lidar; only collisions reveal it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellClass {
    Free,
    Known,
    SemiKnown,
    Unknown,
}

impl CellClass {
    pub fn is_occupied(self) -> bool {
        self != CellClass::Free
    }

    pub fn from_char(c: char) -> Option<Self> {
        match c {
            '.' => Some(CellClass::Free),
            '#' => Some(CellClass::Known),
            's' => Some(CellClass::SemiKnown),
            'u' => Some(CellClass::Unknown),
            _ => None,
        }
    }

    pub fn to_char(self) -> char {
        match self {
            CellClass::Free => '.',
            CellClass::Known => '#',
            CellClass::SemiKnown => 's',
            CellClass::Unknown => 'u',
        }
    }
}

/// Cell index: `x` is the column, `y` the row, both from the grid origin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub x: usize,
    pub y: usize,
}

impl Cell {
    pub fn new(x: usize, y: usize) -> Self {
        Self { x, y }
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.x, self.y)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("point ({x:.3}, {y:.3}) lies outside the grid")]
    OutOfBounds { x: f64, y: f64 },
    #[error("resolution must be positive, got {0}")]
    BadResolution(f64),
    #[error("map line {line}: unexpected character {found:?}")]
    BadCharacter { line: usize, found: char },
    #[error("map line {line}: expected {expected} columns, found {found}")]
    RaggedRow { line: usize, expected: usize, found: usize },
    #[error("map is empty")]
    Empty,
}

/// Prior map plus discovery state.
///
/// Cell classes never change after construction; `discovered` only ever
/// flips from `false` to `true`.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    resolution: f64,
    width: usize,
    height: usize,
    origin: Pose2D,
    cells: Vec<CellClass>,
    discovered: Vec<bool>,
}

impl OccupancyGrid {
    pub fn new(
        resolution: f64,
        width: usize,
        height: usize,
        origin: Pose2D,
        cells: Vec<CellClass>,
    ) -> Result<Self, GridError> {
        if !(resolution > 0.0) || !resolution.is_finite() {
            return Err(GridError::BadResolution(resolution));
        }
        if width == 0 || height == 0 || cells.len() != width * height {
            return Err(GridError::Empty);
        }
        Ok(Self {
            resolution,
            width,
            height,
            origin,
            discovered: vec![false; cells.len()],
            cells,
        })
    }

    pub fn empty(resolution: f64, width: usize, height: usize) -> Result<Self, GridError> {
        Self::new(
            resolution,
            width,
            height,
            Pose2D::default(),
            vec![CellClass::Free; width * height],
        )
    }

    /// Parses the text map format: one line per row, top line is the row with
    /// the largest `y`. `.` free, `#` known, `s` semi-known, `u` unknown.
    /// Lines starting with `;` and blank lines are ignored.
    pub fn parse(text: &str, resolution: f64, origin: Pose2D) -> Result<Self, GridError> {
        let mut rows: Vec<Vec<CellClass>> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim_end();
            if line.is_empty() || line.starts_with(';') {
                continue;
            }
            let mut row = Vec::with_capacity(line.len());
            for c in line.chars() {
                row.push(CellClass::from_char(c).ok_or(GridError::BadCharacter { line: i + 1, found: c })?);
            }
            if let Some(first) = rows.first() {
                if first.len() != row.len() {
                    return Err(GridError::RaggedRow {
                        line: i + 1,
                        expected: first.len(),
                        found: row.len(),
                    });
                }
            }
            rows.push(row);
        }
        if rows.is_empty() {
            return Err(GridError::Empty);
        }
        let height = rows.len();
        let width = rows[0].len();
        let mut cells = vec![CellClass::Free; width * height];
        for (r, row) in rows.iter().enumerate() {
            let y = height - 1 - r;
            for (x, class) in row.iter().enumerate() {
                cells[y * width + x] = *class;
            }
        }
        Self::new(resolution, width, height, origin, cells)
    }

    /// Inverse of [`OccupancyGrid::parse`].
    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity((self.width + 1) * self.height);
        for y in (0..self.height).rev() {
            for x in 0..self.width {
                out.push(self.cells[y * self.width + x].to_char());
            }
            out.push('\n');
        }
        out
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn origin(&self) -> Pose2D {
        self.origin
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn index(&self, cell: Cell) -> usize {
        cell.y * self.width + cell.x
    }

    pub fn cell_at(&self, index: usize) -> Cell {
        Cell::new(index % self.width, index / self.width)
    }

    pub fn contains(&self, x: i64, y: i64) -> bool {
        x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height
    }

    pub fn class(&self, cell: Cell) -> CellClass {
        self.cells[self.index(cell)]
    }

    pub fn is_discovered(&self, cell: Cell) -> bool {
        self.discovered[self.index(cell)]
    }

    /// Marks a cell discovered. Returns true if it was not already.
    pub fn discover(&mut self, cell: Cell) -> bool {
        let i = self.index(cell);
        let fresh = !self.discovered[i];
        self.discovered[i] = true;
        fresh
    }

    /// Whether the navigation planner can see this cell as an obstacle:
    /// known cells always, semi-known cells once discovered.
    pub fn planner_sees_obstacle(&self, cell: Cell) -> bool {
        let i = self.index(cell);
        match self.cells[i] {
            CellClass::Known => true,
            CellClass::SemiKnown => self.discovered[i],
            _ => false,
        }
    }

    pub fn cells(&self) -> impl Iterator<Item = (Cell, CellClass)> + '_ {
        self.cells.iter().enumerate().map(|(i, c)| (self.cell_at(i), *c))
    }

    pub fn discovered_cells(&self) -> impl Iterator<Item = Cell> + '_ {
        self.discovered
            .iter()
            .enumerate()
            .filter(|(_, d)| **d)
            .map(|(i, _)| self.cell_at(i))
    }

    /// Continuous grid coordinates (in cells) of a world point.
    pub fn world_to_local(&self, x: f64, y: f64) -> (f64, f64) {
        let (lx, ly) = self.origin.to_body(x, y);
        (lx / self.resolution, ly / self.resolution)
    }

    /// Cell containing the world point, or an out-of-bounds error.
    pub fn world_to_grid(&self, x: f64, y: f64) -> Result<Cell, GridError> {
        let (gx, gy) = self.world_to_local(x, y);
        let (ix, iy) = (gx.floor(), gy.floor());
        if gx.is_finite() && gy.is_finite() && ix >= 0.0 && iy >= 0.0 {
            let (ix, iy) = (ix as usize, iy as usize);
            if ix < self.width && iy < self.height {
                return Ok(Cell::new(ix, iy));
            }
        }
        Err(GridError::OutOfBounds { x, y })
    }

    pub fn pose_to_grid(&self, p: &Pose2D) -> Result<Cell, GridError> {
        self.world_to_grid(p.x, p.y)
    }

    /// World coordinates of a cell center.
    pub fn grid_to_world(&self, cell: Cell) -> (f64, f64) {
        let bx = (cell.x as f64 + 0.5) * self.resolution;
        let by = (cell.y as f64 + 0.5) * self.resolution;
        self.origin.to_world(bx, by)
    }

    /// Occupied cells of any class.
    pub fn occupied_cells(&self) -> Vec<Cell> {
        self.cells()
            .filter(|(_, c)| c.is_occupied())
            .map(|(cell, _)| cell)
            .collect()
    }
}

/// Distance (m) from the center of cell `(cx, cy)` to the square of cell
/// `(ox, oy)`. Computed from integer offsets so every caller obtains
/// bit-identical values.
#[inline]
pub fn cell_box_distance(resolution: f64, cx: i64, cy: i64, ox: i64, oy: i64) -> f64 {
    let ex = ((cx - ox).abs() as f64 - 0.5).max(0.0);
    let ey = ((cy - oy).abs() as f64 - 0.5).max(0.0);
    resolution * (ex * ex + ey * ey).sqrt()
}

/// Per-cell distance to the nearest inserted obstacle cell, saturated at
/// `cap`. Supports incremental insertion; values only decrease.
#[derive(Debug, Clone)]
pub struct DistanceField {
    resolution: f64,
    width: usize,
    height: usize,
    cap: f64,
    reach: i64,
    values: Vec<f64>,
}

impl DistanceField {
    pub fn new(grid: &OccupancyGrid, cap: f64) -> Self {
        let reach = (cap / grid.resolution()).ceil() as i64 + 1;
        Self {
            resolution: grid.resolution(),
            width: grid.width(),
            height: grid.height(),
            cap,
            reach,
            values: vec![cap; grid.len()],
        }
    }

    pub fn cap(&self) -> f64 {
        self.cap
    }

    pub fn insert(&mut self, obstacle: Cell) {
        let (ox, oy) = (obstacle.x as i64, obstacle.y as i64);
        let x0 = (ox - self.reach).max(0);
        let x1 = (ox + self.reach).min(self.width as i64 - 1);
        let y0 = (oy - self.reach).max(0);
        let y1 = (oy + self.reach).min(self.height as i64 - 1);
        for y in y0..=y1 {
            let row = y as usize * self.width;
            for x in x0..=x1 {
                let d = cell_box_distance(self.resolution, x, y, ox, oy);
                let slot = &mut self.values[row + x as usize];
                if d < *slot {
                    *slot = d;
                }
            }
        }
    }

    pub fn get(&self, cell: Cell) -> f64 {
        self.values[cell.y * self.width + cell.x]
    }

    /// Conservative clearance of any point inside `cell`: the center distance
    /// minus the half-diagonal, floored at zero.
    pub fn clearance(&self, cell: Cell) -> f64 {
        (self.get(cell) - self.half_diagonal()).max(0.0)
    }

    pub fn half_diagonal(&self) -> f64 {
        self.resolution * std::f64::consts::SQRT_2 * 0.5
    }
}
