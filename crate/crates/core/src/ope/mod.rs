//! Model-based Monte Carlo policy evaluation.
//!
//! For every trajectory `i` the estimator starts at the observed `O_{i,1}`,
//! draws `A ~ pi(.|O)` from the target policy, samples `(R, O')` from the
//! transition model under the latents of `i` and time `t`, and iterates to
//! `T`. The value estimate is the average reward over all `N x T x m`
//! simulated cells.

use crate::env::{ActionSpace, Dataset, PolicySpec, TargetPolicy};
use crate::ntn::{NtnModel, NtnParams};
use crate::rng::{self, Purpose, StreamRng, Streams};
use crate::{Error, Result};

/// Generative transition model conditioned on trajectory and time indices.
///
/// Observations are flat row-major `B x obs_dim` buffers on the raw scale.
pub trait TransitionModel {
    fn obs_dim(&self) -> usize;
    fn n_trajectories(&self) -> usize;
    fn horizon(&self) -> usize;
    fn action_space(&self) -> ActionSpace;

    /// Samples one transition per row at 0-based time `t`, using `rngs[b]`
    /// for row `b`.
    #[allow(clippy::too_many_arguments)]
    fn sample_batch(
        &self,
        t: usize,
        trajs: &[usize],
        obs: &[f64],
        actions: &[usize],
        rngs: &mut [StreamRng],
        rewards: &mut [f64],
        next_obs: &mut [f64],
    ) -> Result<()>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpeConfig {
    /// Rollouts per trajectory (`m`).
    pub n_rollouts_per_traj: usize,
    pub target: PolicySpec,
    pub crossfit: bool,
    pub seed: u64,
}

impl OpeConfig {
    pub fn new(target: PolicySpec, seed: u64) -> Self {
        Self { n_rollouts_per_traj: 100, target, crossfit: false, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_rollouts_per_traj < 1 {
            return Err(Error::config("n_rollouts_per_traj must be >= 1"));
        }
        Ok(())
    }
}

/// Value estimate with its Monte Carlo standard error.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueEstimate {
    pub value: f64,
    /// Standard deviation of the per-trajectory means over `sqrt(N)`.
    pub std_error: f64,
    /// Average reward of trajectory `i` over its `m` rollouts.
    pub per_trajectory: Vec<f64>,
}

impl ValueEstimate {
    fn from_per_trajectory(per_trajectory: Vec<f64>) -> Self {
        let n = per_trajectory.len() as f64;
        let value = per_trajectory.iter().sum::<f64>() / n;
        let var = if per_trajectory.len() > 1 {
            per_trajectory.iter().map(|x| (x - value).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self { value, std_error: (var / n).sqrt(), per_trajectory }
    }
}

const MAX_BATCH: usize = 8192;

/// One rollout of trajectory `traj` from `o1`; returns the `T` rewards.
pub fn rollout(
    model: &dyn TransitionModel,
    traj: usize,
    o1: &[f64],
    target: &TargetPolicy,
    rng: &mut StreamRng,
) -> Result<Vec<f64>> {
    let d = model.obs_dim();
    if o1.len() != d {
        return Err(Error::dim("initial observation length"));
    }
    if traj >= model.n_trajectories() {
        return Err(Error::dim(format!("no latent estimate for trajectory {traj}")));
    }
    let mut obs = o1.to_vec();
    let mut next = vec![0.0; d];
    let mut rewards = Vec::with_capacity(model.horizon());
    for t in 0..model.horizon() {
        let a = rng::categorical(rng, &target.probs(&obs));
        let mut r = [0.0];
        model.sample_batch(t, &[traj], &obs, &[a], std::slice::from_mut(rng), &mut r, &mut next)?;
        rewards.push(r[0]);
        std::mem::swap(&mut obs, &mut next);
    }
    Ok(rewards)
}

/// Plug-in estimate over all trajectories of `model`.
///
/// `initial_obs` is the flat `N x obs_dim` buffer of observed `O_{i,1}`.
/// Rollout `run` of trajectory `i` draws from stream `(Rollout, i*m + run)`,
/// so results do not depend on batching.
pub fn estimate_value(
    model: &dyn TransitionModel,
    initial_obs: &[f64],
    cfg: &OpeConfig,
) -> Result<ValueEstimate> {
    cfg.validate()?;
    let d = model.obs_dim();
    let n = model.n_trajectories();
    if initial_obs.len() != n * d {
        return Err(Error::dim(format!(
            "{} initial observations for {n} latent trajectories",
            initial_obs.len() / d.max(1)
        )));
    }
    let target = TargetPolicy::new(cfg.target.clone(), policy_env(model, &cfg.target)?)?;
    let m = cfg.n_rollouts_per_traj;
    let horizon = model.horizon();
    let streams = Streams::new(cfg.seed);
    let mut totals = vec![0.0; n];
    let jobs: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..m).map(move |r| (i, r))).collect();
    for chunk in jobs.chunks(MAX_BATCH) {
        let b = chunk.len();
        let trajs: Vec<usize> = chunk.iter().map(|&(i, _)| i).collect();
        let mut rngs: Vec<StreamRng> = chunk
            .iter()
            .map(|&(i, r)| streams.stream(Purpose::Rollout, (i * m + r) as u64))
            .collect();
        let mut obs = Vec::with_capacity(b * d);
        for &i in &trajs {
            obs.extend_from_slice(&initial_obs[i * d..(i + 1) * d]);
        }
        let mut next = vec![0.0; b * d];
        let mut rewards = vec![0.0; b];
        let mut actions = vec![0; b];
        for t in 0..horizon {
            for k in 0..b {
                actions[k] = rng::categorical(&mut rngs[k], &target.probs(&obs[k * d..(k + 1) * d]));
            }
            model.sample_batch(t, &trajs, &obs, &actions, &mut rngs, &mut rewards, &mut next)?;
            for k in 0..b {
                totals[trajs[k]] += rewards[k];
            }
            std::mem::swap(&mut obs, &mut next);
        }
    }
    let scale = (m * horizon) as f64;
    Ok(ValueEstimate::from_per_trajectory(totals.into_iter().map(|s| s / scale).collect()))
}

/// Env kind whose target policies apply to `model`'s observation space.
fn policy_env(model: &dyn TransitionModel, target: &PolicySpec) -> Result<crate::env::EnvKind> {
    use crate::env::EnvKind;
    let kind = match (model.obs_dim(), model.action_space()) {
        (1, ActionSpace::Binary) => EnvKind::Linear,
        (4, ActionSpace::Binary) => EnvKind::DynamicProcess,
        (2, ActionSpace::TreatmentPair) => EnvKind::TumorGrowth,
        _ => return Err(Error::dim("model does not match any environment")),
    };
    target.check_env(kind)?;
    Ok(kind)
}

/// Plug-in estimate with a trained network and the dataset's `O_{i,1}`.
pub fn estimate_with_params(params: &NtnParams, data: &Dataset, cfg: &OpeConfig) -> Result<ValueEstimate> {
    let model = NtnModel::new(params.clone())?;
    estimate_value(&model, &data.initial_observations(), cfg)
}

/// Trajectory folds for cross-fitting: the first `ceil(N/2)` and the rest.
pub fn crossfit_folds(n: usize) -> (Vec<usize>, Vec<usize>) {
    let h = n.div_ceil(2);
    ((0..h).collect(), (h..n).collect())
}

/// Cross-fitted estimate.
///
/// `train(fold_data, fold)` fits a network on one fold. Fold `j`'s initial
/// observations and latent estimates are then evaluated under the other
/// fold's transition network, and the two fold values are averaged.
pub fn crossfit_estimate<F>(data: &Dataset, cfg: &OpeConfig, mut train: F) -> Result<ValueEstimate>
where
    F: FnMut(&Dataset, usize) -> Result<NtnParams>,
{
    cfg.validate()?;
    if data.n < 2 {
        return Err(Error::config("cross-fitting needs at least two trajectories"));
    }
    let (f1, f2) = crossfit_folds(data.n);
    let d1 = data.select(&f1);
    let d2 = data.select(&f2);
    let p1 = train(&d1, 0)?;
    let p2 = train(&d2, 1)?;
    let e1 = estimate_with_params(&p2.with_embeddings_from(&p1)?, &d1, cfg)?;
    let e2 = estimate_with_params(&p1.with_embeddings_from(&p2)?, &d2, cfg)?;
    let value = 0.5 * (e1.value + e2.value);
    let std_error = 0.5 * (e1.std_error.powi(2) + e2.std_error.powi(2)).sqrt();
    let mut per_trajectory = e1.per_trajectory;
    per_trajectory.extend(e2.per_trajectory);
    Ok(ValueEstimate { value, std_error, per_trajectory })
}

/// Floor applied to the mean squared error before taking the log.
pub const LMSE_FLOOR: f64 = 1e-300;

/// `(ln mean squared error, mean error)` of repeated estimates.
pub fn metrics(estimates: &[f64], eta_true: f64) -> Result<(f64, f64)> {
    if estimates.is_empty() {
        return Err(Error::config("metrics need at least one estimate"));
    }
    let r = estimates.len() as f64;
    let mse = estimates.iter().map(|e| (e - eta_true).powi(2)).sum::<f64>() / r;
    let bias = estimates.iter().map(|e| e - eta_true).sum::<f64>() / r;
    Ok((mse.max(LMSE_FLOOR).ln(), bias))
}

/// Repeated estimates of one policy value against its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub eta_true: f64,
    pub estimates: Vec<f64>,
    pub seeds: Vec<u64>,
    pub runtime_s: f64,
    pub lmse: f64,
    pub bias: f64,
}

impl EvalReport {
    pub fn new(eta_true: f64, estimates: Vec<f64>, seeds: Vec<u64>, runtime_s: f64) -> Result<Self> {
        let (lmse, bias) = metrics(&estimates, eta_true)?;
        Ok(Self { eta_true, estimates, seeds, runtime_s, lmse, bias })
    }

    /// Mean of the estimates.
    pub fn eta_hat(&self) -> f64 {
        self.estimates.iter().sum::<f64>() / self.estimates.len() as f64
    }
}
