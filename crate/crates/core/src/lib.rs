//! Shared-control core for a single leader arm driving a mobile base and a
//! follower arm.
//!
//! Layers, bottom up: [`model`] and [`grid`] hold the vocabulary types,
//! [`kinematics`] the serial-chain math, [`control`] the torque and velocity
//! laws, [`planning`] the global and local planners, [`sim`] the fixed-step
//! world, [`modes`] the navigation/manipulation state machine and [`harness`]
//! the scripted operators, trials and metrics.

pub mod grid;
pub mod kinematics;
pub mod model;
pub mod scenario;
pub mod control;
pub mod planning;
pub mod vehicle;
pub mod modes;
pub mod sim;
pub mod harness;
