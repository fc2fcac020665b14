//! Grouped reward terms. Each term is `weight * kernel(inputs)`; a group is the sum of
//! its weighted terms.

use serde::{Deserialize, Serialize};

/// Everything the reward terms read from one control step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RewardInputs {
    /// `(v_x, v_y, omega_z)` command.
    pub command: [f64; 3],
    /// Base linear velocity in the yaw-aligned frame.
    pub lin_vel: [f64; 3],
    /// Base angular velocity in the body frame.
    pub ang_vel: [f64; 3],
    /// Gravity direction in the body frame.
    pub gravity: [f64; 3],
    pub d_left: f64,
    pub d_right: f64,
    pub psi: f64,
    pub eps: f64,
    /// Foot-offset target accelerations (12).
    pub joint_acc: Vec<f64>,
    /// `sum |F . v|` over the feet.
    pub power: f64,
    pub n_col: usize,
    pub action: Vec<f64>,
    pub prev_action: Vec<f64>,
    pub prev_prev_action: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardWeights {
    pub lin_vel: f64,
    pub ang_vel: f64,
    pub foothold_dense: f64,
    pub foothold_sparse: f64,
    pub foothold_yaw: f64,
    pub vel_z: f64,
    pub ang_vel_xy: f64,
    pub orientation: f64,
    pub joint_acc: f64,
    pub power: f64,
    pub collision: f64,
    pub action_rate: f64,
    pub smoothness: f64,
    /// Group weights used for advantage mixing, `(task, foothold, style)`.
    pub groups: [f64; 3],
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            lin_vel: 1.0,
            ang_vel: 0.5,
            foothold_dense: 1.0,
            foothold_sparse: 1.0,
            foothold_yaw: 1.0,
            vel_z: -1.0,
            ang_vel_xy: -0.05,
            orientation: -1.0,
            joint_acc: -2.5e-7,
            power: -2e-5,
            collision: -10.0,
            action_rate: -0.01,
            smoothness: -0.01,
            groups: [3.0, 1.5, 1.0],
        }
    }
}

pub const TASK: usize = 0;
pub const FOOTHOLD: usize = 1;
pub const STYLE: usize = 2;
pub const GROUP_NAMES: [&str; 3] = ["task", "foothold", "style"];

/// Weighted value of every term, grouped.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardGroups {
    pub lin_vel: f64,
    pub ang_vel: f64,
    pub foothold_dense: f64,
    pub foothold_sparse: f64,
    pub foothold_yaw: f64,
    pub vel_z: f64,
    pub ang_vel_xy: f64,
    pub orientation: f64,
    pub joint_acc: f64,
    pub power: f64,
    pub collision: f64,
    pub action_rate: f64,
    pub smoothness: f64,
}

impl RewardGroups {
    pub fn task(&self) -> f64 {
        self.lin_vel + self.ang_vel
    }

    pub fn foothold(&self) -> f64 {
        self.foothold_dense + self.foothold_sparse + self.foothold_yaw
    }

    pub fn style(&self) -> f64 {
        self.vel_z
            + self.ang_vel_xy
            + self.orientation
            + self.joint_acc
            + self.power
            + self.collision
            + self.action_rate
            + self.smoothness
    }

    pub fn groups(&self) -> [f64; 3] {
        [self.task(), self.foothold(), self.style()]
    }

    /// Single scalar reward: group values combined with the group weights.
    pub fn total(&self, weights: &RewardWeights) -> f64 {
        self.groups().iter().zip(weights.groups).map(|(r, w)| r * w).sum()
    }
}

fn sq_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

fn sq_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn compute_rewards(i: &RewardInputs, w: &RewardWeights) -> RewardGroups {
    let lin_err = sq_diff(&i.command[..2], &i.lin_vel[..2]);
    let ang_err = (i.command[2] - i.ang_vel[2]).powi(2);
    let arrived = i.d_left < i.eps && i.d_right < i.eps;
    let smooth: f64 = i
        .action
        .iter()
        .zip(&i.prev_action)
        .zip(&i.prev_prev_action)
        .map(|((a, b), c)| (a - 2.0 * b + c).powi(2))
        .sum();
    RewardGroups {
        lin_vel: w.lin_vel * (-4.0 * lin_err).exp(),
        ang_vel: w.ang_vel * (-4.0 * ang_err).exp(),
        foothold_dense: w.foothold_dense * (-(i.d_left + i.d_right)).exp(),
        foothold_sparse: w.foothold_sparse * if arrived { 1.0 } else { 0.0 },
        foothold_yaw: w.foothold_yaw * (-i.psi.abs()).exp(),
        vel_z: w.vel_z * i.lin_vel[2] * i.lin_vel[2],
        ang_vel_xy: w.ang_vel_xy * sq_norm(&i.ang_vel[..2]),
        orientation: w.orientation * sq_norm(&i.gravity[..2]),
        joint_acc: w.joint_acc * sq_norm(&i.joint_acc),
        power: w.power * i.power,
        collision: w.collision * i.n_col as f64,
        action_rate: w.action_rate * sq_diff(&i.action, &i.prev_action),
        smoothness: w.smoothness * smooth,
    }
}
