//! Global route planning, the dynamic-window local planner and the
//! navigation assistance built on both.

pub mod assist;
pub mod dwa;
pub mod global;

pub use assist::{grasp_goal, NavigationAssist};
pub use dwa::{dwa_step, lookahead_pose, BaseState, DwaParams, DwaResult, LocalTrajectory};
pub use global::{plan_cells, plan_global, GlobalPath, GridView, PathCost, PlanError};
