use nalgebra::DMatrix;

use super::net::predict_batch;
use super::params::NtnParams;
use crate::env::ActionSpace;
use crate::ope::TransitionModel;
use crate::rng::{self, StreamRng};
use crate::{Error, Result};

/// A trained network used as a generative transition model on the raw
/// data scale.
#[derive(Debug, Clone)]
pub struct NtnModel {
    pub params: NtnParams,
}

impl NtnModel {
    pub fn new(params: NtnParams) -> Result<Self> {
        params.check_dims()?;
        Ok(Self { params })
    }
}

impl TransitionModel for NtnModel {
    fn obs_dim(&self) -> usize {
        self.params.arch.obs_dim()
    }

    fn n_trajectories(&self) -> usize {
        self.params.arch.n_traj
    }

    fn horizon(&self) -> usize {
        self.params.arch.horizon
    }

    fn action_space(&self) -> ActionSpace {
        self.params.arch.env.action_space()
    }

    fn sample_batch(
        &self,
        t: usize,
        trajs: &[usize],
        obs: &[f64],
        actions: &[usize],
        rngs: &mut [StreamRng],
        rewards: &mut [f64],
        next_obs: &mut [f64],
    ) -> Result<()> {
        let d = self.obs_dim();
        let b = trajs.len();
        let norm = &self.params.norm;
        let mut x = DMatrix::zeros(d, b);
        let mut buf = vec![0.0; d];
        for col in 0..b {
            norm.norm_obs(&obs[col * d..(col + 1) * d], &mut buf);
            x.column_mut(col).copy_from_slice(&buf);
        }
        let times = vec![t; b];
        let (mu, sigma) = predict_batch(&self.params, &x, actions, trajs, &times)?;
        let mut draw = vec![0.0; d];
        for col in 0..b {
            let rng = &mut rngs[col];
            let r = mu[(0, col)] + sigma[(0, col)] * rng::normal(rng);
            for k in 0..d {
                draw[k] = mu[(1 + k, col)] + sigma[(1 + k, col)] * rng::normal(rng);
            }
            rewards[col] = norm.denorm_reward(r);
            norm.denorm_obs(&draw, &mut next_obs[col * d..(col + 1) * d]);
            if !rewards[col].is_finite() || next_obs[col * d..(col + 1) * d].iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "sampled transition for trajectory {} at t={t}",
                    trajs[col]
                )));
            }
        }
        Ok(())
    }
}
