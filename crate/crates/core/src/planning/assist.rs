//! Navigation assistance: keeps the planner's view of the map, the route to
//! the object, the current local plan and the logged reference trajectory.

use log::{debug, warn};

use crate::grid::{Cell, CellClass, DistanceField, OccupancyGrid};
use crate::model::Pose2D;
use crate::planning::dwa::{dwa_step, lookahead_pose, nearest_waypoint, BaseState, DwaParams, DwaResult};
use crate::planning::global::{bresenham, plan_cells, GlobalPath, GridView, PlanError};
use crate::scenario::ScenarioConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RouteParams {
    pub inflation: f64,
    pub approach_distance: f64,
    pub lookahead_index: usize,
    pub obstacle_near: f64,
}

/// Base pose from which the follower arm reaches the object.
pub fn grasp_goal(cfg: &ScenarioConfig) -> Pose2D {
    let g = cfg.object.gamma_rad;
    let back = cfg.arms.mount_x_m + cfg.planner.standoff_m;
    Pose2D::new(cfg.object.x_m - back * g.cos(), cfg.object.y_m - back * g.sin(), g)
}

#[derive(Debug, Clone)]
pub struct NavigationAssist {
    dwa: DwaParams,
    route_params: RouteParams,
    /// Obstacles visible to the planner.
    field: DistanceField,
    /// Obstacles seen by the lidar so far.
    discovered: DistanceField,
    goal: Pose2D,
    path: GlobalPath,
    /// Index of the first waypoint of the straight approach segment.
    approach_start: usize,
    /// Reference consumed before the most recent replan.
    committed: Vec<Pose2D>,
    last: Option<DwaResult>,
    replans: u32,
}

impl NavigationAssist {
    pub fn new(grid: &OccupancyGrid, cfg: &ScenarioConfig, dwa: DwaParams, start: Pose2D) -> Result<Self, PlanError> {
        let route_params = RouteParams {
            inflation: cfg.planner.inflation_m,
            approach_distance: cfg.planner.approach_distance_m,
            lookahead_index: cfg.planner.lookahead_index,
            obstacle_near: cfg.planner.obstacle_near_m,
        };
        let res = grid.resolution();
        let cap = dwa.field_cap(res).max(route_params.inflation + 2.0 * res);
        let mut field = DistanceField::new(grid, cap);
        for i in 0..grid.len() {
            let c = grid.cell_at(i);
            if grid.planner_sees_obstacle(c) {
                field.insert(c);
            }
        }
        let mut discovered = DistanceField::new(grid, dwa.footprint_radius + route_params.obstacle_near + 2.0 * res);
        for c in grid.discovered_cells() {
            if grid.class(c).is_occupied() {
                discovered.insert(c);
            }
        }
        let goal = grasp_goal(cfg);
        let mut me = Self {
            dwa,
            route_params,
            field,
            discovered,
            goal,
            path: GlobalPath {
                cells: vec![],
                waypoints: vec![],
                length: 0.0,
            },
            approach_start: 0,
            committed: Vec::new(),
            last: None,
            replans: 0,
        };
        let (path, approach_start) = me.route(grid, start)?;
        me.path = path;
        me.approach_start = approach_start;
        Ok(me)
    }

    pub fn goal(&self) -> Pose2D {
        self.goal
    }

    pub fn path(&self) -> &GlobalPath {
        &self.path
    }

    pub fn field(&self) -> &DistanceField {
        &self.field
    }

    pub fn replans(&self) -> u32 {
        self.replans
    }

    pub fn last(&self) -> Option<&DwaResult> {
        self.last.as_ref()
    }

    fn route(&self, grid: &OccupancyGrid, from: Pose2D) -> Result<(GlobalPath, usize), PlanError> {
        let mut view = GridView::inflated(grid, &self.field, self.route_params.inflation);
        let out = |which, p: Pose2D| PlanError::OutOfBounds { which, x: p.x, y: p.y };
        let start = view.world_to_cell(from.x, from.y).ok_or(out("start", from))?;
        let goal = view.world_to_cell(self.goal.x, self.goal.y).ok_or(out("goal", self.goal))?;
        let d = self.route_params.approach_distance;
        let pre = Pose2D::new(
            self.goal.x - d * self.goal.gamma.cos(),
            self.goal.y - d * self.goal.gamma.sin(),
            self.goal.gamma,
        );
        let pre_cell = view.world_to_cell(pre.x, pre.y).ok_or(out("pre-goal", pre))?;
        if view.is_blocked(start) {
            // squeezed against an obstacle: shrink the inflation to what we have
            let here = self.field.get(start);
            view = GridView::inflated(grid, &self.field, self.route_params.inflation.min(here));
        }
        let (mut cells, _) = plan_cells(&view, start, pre_cell)?;
        let approach_start = cells.len() - 1;
        cells.extend(bresenham(pre_cell, goal).into_iter().skip(1));
        Ok((GlobalPath::from_cells(&view, cells, Some(self.goal.gamma)), approach_start))
    }

    /// Feeds cells discovered by the lidar. Replans when a newly visible
    /// obstacle crowds the current path.
    pub fn observe(&mut self, grid: &OccupancyGrid, fresh: &[Cell], base: &Pose2D) {
        let mut new_visible = false;
        for &c in fresh {
            if grid.class(c).is_occupied() {
                self.discovered.insert(c);
            }
            if grid.class(c) == CellClass::SemiKnown {
                self.field.insert(c);
                new_visible = true;
            }
        }
        if !new_visible {
            return;
        }
        let crowded = self
            .path
            .cells
            .iter()
            .any(|c| self.field.get(*c) < self.route_params.inflation);
        if crowded {
            self.replan(grid, base);
        }
    }

    fn replan(&mut self, grid: &OccupancyGrid, base: &Pose2D) {
        let here = nearest_waypoint(&self.path, base.x, base.y);
        if here >= self.approach_start {
            debug!("obstacle discovered during the final approach; keeping the route");
            return;
        }
        match self.route(grid, *base) {
            Ok((path, approach_start)) => {
                self.committed.extend_from_slice(&self.path.waypoints[..here]);
                self.path = path;
                self.approach_start = approach_start;
                self.replans += 1;
            }
            Err(e) => warn!("replanning failed, keeping the previous route: {e}"),
        }
    }

    /// Runs the local planner from the current base state.
    pub fn plan(&mut self, grid: &OccupancyGrid, state: &BaseState) -> &DwaResult {
        let r = dwa_step(state, grid, &self.field, &self.path, &self.dwa).expect("route is never empty");
        self.last = Some(r);
        self.last.as_ref().expect("just set")
    }

    /// Lookahead pose of the latest local plan, if it found a free command.
    pub fn lookahead(&self) -> Option<Pose2D> {
        let r = self.last.as_ref()?;
        if r.blocked {
            return None;
        }
        lookahead_pose(&r.trajectory, self.route_params.lookahead_index).ok()
    }

    /// Whether a discovered obstacle lies within the configured distance of
    /// the footprint.
    pub fn obstacle_near(&self, grid: &OccupancyGrid, pose: &Pose2D) -> bool {
        match grid.pose_to_grid(pose) {
            Ok(c) => self.discovered.get(c) < self.dwa.footprint_radius + self.route_params.obstacle_near,
            Err(_) => true,
        }
    }

    /// Reference trajectory: the consumed part of every superseded route
    /// followed by the current route.
    pub fn reference(&self) -> Vec<Pose2D> {
        let mut r = self.committed.clone();
        r.extend_from_slice(&self.path.waypoints);
        r
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::Scenario;
    use crate::vehicle::Bicycle;

    #[test]
    fn default_route_reaches_goal_clear_of_obstacles() {
        let s = Scenario::builtin_default();
        let dwa = DwaParams::from_config(&s.config.planner, Bicycle::from_config(&s.config.vehicle));
        let a = NavigationAssist::new(&s.grid, &s.config, dwa, s.config.start.pose()).unwrap();
        let last = *a.path().waypoints.last().unwrap();
        assert!(last.distance(&a.goal()) < 0.05);
        for c in &a.path().cells {
            assert!(!s.grid.planner_sees_obstacle(*c));
        }
        assert_eq!(a.reference().len(), a.path().waypoints.len());
    }

    #[test]
    fn discovering_a_blocking_obstacle_replans() {
        let mut s = Scenario::builtin_default();
        let dwa = DwaParams::from_config(&s.config.planner, Bicycle::from_config(&s.config.vehicle));
        let start = s.config.start.pose();
        let mut a = NavigationAssist::new(&s.grid, &s.config, dwa, start).unwrap();
        let semi: Vec<Cell> = s
            .grid
            .cells()
            .filter(|(_, k)| *k == CellClass::SemiKnown)
            .map(|(c, _)| c)
            .collect();
        let crosses = a.path().cells.iter().any(|c| semi.contains(c));
        assert!(crosses, "default route should run through the undiscovered block");
        for c in &semi {
            s.grid.discover(*c);
        }
        a.observe(&s.grid, &semi, &start);
        assert_eq!(a.replans(), 1);
        assert!(a.path().cells.iter().all(|c| !semi.contains(c)));
    }
}
