//! Kinematic bicycle model of the Ackermann base, shared by the simulator and
//! the local planner so planner rollouts match the simulated motion.

use crate::model::{BaseVelocity, Pose2D};
use crate::scenario::VehicleConfig;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bicycle {
    pub wheelbase: f64,
    pub max_steer: f64,
    pub min_turn_speed: f64,
}

impl Default for Bicycle {
    fn default() -> Self {
        Self::from_config(&VehicleConfig::default())
    }
}

impl Bicycle {
    pub fn from_config(c: &VehicleConfig) -> Self {
        Self {
            wheelbase: c.wheelbase_m,
            max_steer: c.max_steer_rad,
            min_turn_speed: c.min_turn_speed_mps,
        }
    }

    /// Steering angle realizing the command, after saturation.
    pub fn steer_angle(&self, cmd: &BaseVelocity) -> f64 {
        if cmd.v_x.abs() < self.min_turn_speed {
            return 0.0;
        }
        (self.wheelbase * cmd.v_gamma / cmd.v_x).atan().clamp(-self.max_steer, self.max_steer)
    }

    /// Yaw rate the vehicle actually achieves under the command.
    pub fn yaw_rate(&self, cmd: &BaseVelocity) -> f64 {
        if cmd.v_x.abs() < self.min_turn_speed {
            return 0.0;
        }
        cmd.v_x / self.wheelbase * self.steer_angle(cmd).tan()
    }

    /// Exact arc integration over `dt` at constant command.
    pub fn advance(&self, pose: &Pose2D, cmd: &BaseVelocity, dt: f64) -> Pose2D {
        let v = cmd.v_x;
        let w = self.yaw_rate(cmd);
        let g0 = pose.gamma;
        if w.abs() < 1e-12 {
            let (s, c) = g0.sin_cos();
            return Pose2D::new(pose.x + v * dt * c, pose.y + v * dt * s, g0);
        }
        let g1 = g0 + w * dt;
        let r = v / w;
        Pose2D::new(pose.x + r * (g1.sin() - g0.sin()), pose.y - r * (g1.cos() - g0.cos()), g1)
    }
}
