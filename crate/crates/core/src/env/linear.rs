//! Scalar linear env:
//!
//! ```text
//! O' = 0.7 O + A + 2u + 2w - 0.5 + e_s,   e_s ~ N(0, 1)
//! R  = O + 3A + 2u + 2w + e_r,            e_r ~ N(0, linear_reward_var)
//! ```

use super::{CellLatents, EnvConfig, StepOutcome};
use crate::rng::{self, StreamRng};

pub(crate) fn reward_mean(obs: f64, action: usize, l: CellLatents) -> f64 {
    obs + 3.0 * action as f64 + 2.0 * l.u + 2.0 * l.w
}

pub(crate) fn next_obs_mean(obs: f64, action: usize, l: CellLatents) -> f64 {
    0.7 * obs + action as f64 + 2.0 * l.u + 2.0 * l.w - 0.5
}

pub(crate) fn step(
    config: &EnvConfig,
    obs: &[f64],
    action: usize,
    l: CellLatents,
    noise: &mut StreamRng,
) -> StepOutcome {
    let e_s = rng::normal(noise) * config.noise_scale;
    let e_r = rng::normal(noise) * config.noise_scale * config.linear_reward_var.sqrt();
    StepOutcome {
        reward: reward_mean(obs[0], action, l) + e_r,
        next_obs: vec![next_obs_mean(obs[0], action, l) + e_s],
        clamped: false,
    }
}
