//! Seeded simulators for the three data-generating processes.
//!
//! Generation happens in two steps: latent confounders are drawn into a
//! [`LatentTable`] from their own random streams, then [`simulate`] runs the
//! dynamics given that table. Keeping the two apart lets callers regenerate a
//! dataset under substituted latents with the exact same noise and action
//! draws.

mod dynamic;
pub mod io;
mod linear;
mod policy;
mod tumor;

pub use policy::{policy_prob, sigmoid, CellLatents, PolicySpec, TargetPolicy};
pub use tumor::{diameter, TumorParams, TumorPatient};
pub(crate) use linear::{next_obs_mean as linear_next_obs_mean, reward_mean as linear_reward_mean};

use crate::ope::{TransitionModel, ValueEstimate};
use crate::rng::{self, Purpose, StreamRng, Streams};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum EnvKind {
    Linear,
    DynamicProcess,
    TumorGrowth,
}

impl EnvKind {
    pub fn obs_dim(self) -> usize {
        match self {
            EnvKind::Linear => 1,
            EnvKind::DynamicProcess => 4,
            EnvKind::TumorGrowth => 2,
        }
    }

    pub fn action_space(self) -> ActionSpace {
        match self {
            EnvKind::TumorGrowth => ActionSpace::TreatmentPair,
            _ => ActionSpace::Binary,
        }
    }

    pub fn default_horizon(self) -> usize {
        match self {
            EnvKind::TumorGrowth => 60,
            _ => 50,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EnvKind::Linear => "Linear",
            EnvKind::DynamicProcess => "DynamicProcess",
            EnvKind::TumorGrowth => "TumorGrowth",
        }
    }
}

impl std::str::FromStr for EnvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "Linear" | "linear" => Ok(EnvKind::Linear),
            "DynamicProcess" | "dynamic-process" | "dp" | "DP" => Ok(EnvKind::DynamicProcess),
            "TumorGrowth" | "tumor-growth" | "tumor" => Ok(EnvKind::TumorGrowth),
            other => Err(Error::config(format!("unknown env kind `{other}`"))),
        }
    }
}

/// Discrete action spaces. Actions are stored as ids in `0..n_actions()`.
///
/// For [`ActionSpace::TreatmentPair`] the id is `2 * chemo + radio`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionSpace {
    Binary,
    TreatmentPair,
}

impl ActionSpace {
    pub fn n_actions(self) -> usize {
        match self {
            ActionSpace::Binary => 2,
            ActionSpace::TreatmentPair => 4,
        }
    }

    /// Number of CSV columns used to write an action.
    pub fn n_columns(self) -> usize {
        match self {
            ActionSpace::Binary => 1,
            ActionSpace::TreatmentPair => 2,
        }
    }

    pub fn components(self, id: usize) -> Vec<u8> {
        match self {
            ActionSpace::Binary => vec![id as u8],
            ActionSpace::TreatmentPair => vec![(id / 2) as u8, (id % 2) as u8],
        }
    }

    pub fn from_components(self, parts: &[u8]) -> Option<usize> {
        match (self, parts) {
            (ActionSpace::Binary, [a]) if *a <= 1 => Some(*a as usize),
            (ActionSpace::TreatmentPair, [c, r]) if *c <= 1 && *r <= 1 => {
                Some(2 * *c as usize + *r as usize)
            }
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvConfig {
    pub kind: EnvKind,
    pub n_trajectories: usize,
    pub horizon: usize,
    /// Confounding strength in `[0, 1]`; ignored by the linear env.
    pub gamma: f64,
    pub seed: u64,
    /// Variance of the linear env's reward noise.
    pub linear_reward_var: f64,
    /// Multiplies every additive noise draw (1 = nominal).
    pub noise_scale: f64,
    /// Multiplies the Gaussian latent draws of the linear and DP envs.
    pub latent_scale: f64,
    pub tumor: TumorParams,
}

impl EnvConfig {
    pub fn new(kind: EnvKind, n_trajectories: usize, seed: u64) -> Self {
        Self {
            kind,
            n_trajectories,
            horizon: kind.default_horizon(),
            gamma: 1.0,
            seed,
            linear_reward_var: 2.0,
            noise_scale: 1.0,
            latent_scale: 1.0,
            tumor: TumorParams::default(),
        }
    }

    pub fn with_horizon(mut self, horizon: usize) -> Self {
        self.horizon = horizon;
        self
    }

    pub fn with_gamma(mut self, gamma: f64) -> Self {
        self.gamma = gamma;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_trajectories == 0 {
            return Err(Error::config("n_trajectories must be >= 1"));
        }
        if self.horizon == 0 {
            return Err(Error::config("horizon must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::config(format!("gamma = {} is outside [0, 1]", self.gamma)));
        }
        if !(self.linear_reward_var >= 0.0) || !self.linear_reward_var.is_finite() {
            return Err(Error::config("linear_reward_var must be finite and >= 0"));
        }
        if !(self.noise_scale >= 0.0) || !(self.latent_scale >= 0.0) {
            return Err(Error::config("noise_scale and latent_scale must be >= 0"));
        }
        if self.kind == EnvKind::TumorGrowth {
            self.tumor.validate()?;
        }
        Ok(())
    }

    fn expect_kind(&self, kind: EnvKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::config(format!(
                "expected env kind {}, got {}",
                kind.name(),
                self.kind.name()
            )));
        }
        Ok(())
    }
}

/// Offline data: an `N x T` grid of (observation, action, reward).
///
/// `terminal_observations` holds `O_{i,T+1}`, the observation after the last
/// action, so every cell has a next-observation target.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub kind: EnvKind,
    pub n: usize,
    pub t: usize,
    pub obs_dim: usize,
    pub observations: Vec<f64>,
    pub terminal_observations: Vec<f64>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
}

impl Dataset {
    pub fn empty(kind: EnvKind, n: usize, t: usize) -> Self {
        let d = kind.obs_dim();
        Self {
            kind,
            n,
            t,
            obs_dim: d,
            observations: vec![0.0; n * t * d],
            terminal_observations: vec![0.0; n * d],
            actions: vec![0; n * t],
            rewards: vec![0.0; n * t],
        }
    }

    pub fn action_space(&self) -> ActionSpace {
        self.kind.action_space()
    }

    #[inline]
    pub fn cell(&self, i: usize, t: usize) -> usize {
        i * self.t + t
    }

    pub fn obs(&self, i: usize, t: usize) -> &[f64] {
        let c = self.cell(i, t) * self.obs_dim;
        &self.observations[c..c + self.obs_dim]
    }

    pub fn next_obs(&self, i: usize, t: usize) -> &[f64] {
        if t + 1 < self.t {
            self.obs(i, t + 1)
        } else {
            &self.terminal_observations[i * self.obs_dim..(i + 1) * self.obs_dim]
        }
    }

    pub fn initial_obs(&self, i: usize) -> &[f64] {
        self.obs(i, 0)
    }

    /// Initial observations of all trajectories, row-major `N x d`.
    pub fn initial_observations(&self) -> Vec<f64> {
        (0..self.n).flat_map(|i| self.initial_obs(i).to_vec()).collect()
    }

    pub fn action(&self, i: usize, t: usize) -> usize {
        self.actions[self.cell(i, t)]
    }

    pub fn reward(&self, i: usize, t: usize) -> f64 {
        self.rewards[self.cell(i, t)]
    }

    /// Sub-dataset of the given trajectories, renumbered `0..idx.len()`.
    pub fn select(&self, idx: &[usize]) -> Dataset {
        let d = self.obs_dim;
        let mut out = Dataset::empty(self.kind, idx.len(), self.t);
        for (k, &i) in idx.iter().enumerate() {
            for t in 0..self.t {
                let src = self.cell(i, t);
                let dst = out.cell(k, t);
                out.observations[dst * d..(dst + 1) * d]
                    .copy_from_slice(&self.observations[src * d..(src + 1) * d]);
                out.actions[dst] = self.actions[src];
                out.rewards[dst] = self.rewards[src];
            }
            out.terminal_observations[k * d..(k + 1) * d]
                .copy_from_slice(&self.terminal_observations[i * d..(i + 1) * d]);
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let cells = self.n * self.t;
        if self.obs_dim != self.kind.obs_dim() {
            return Err(Error::dim("observation dimension does not match env kind"));
        }
        if self.observations.len() != cells * self.obs_dim
            || self.actions.len() != cells
            || self.rewards.len() != cells
            || self.terminal_observations.len() != self.n * self.obs_dim
        {
            return Err(Error::dim("dataset arrays do not share (N, T)"));
        }
        let na = self.action_space().n_actions();
        if self.actions.iter().any(|&a| a >= na) {
            return Err(Error::dim("action outside the declared action space"));
        }
        if self
            .observations
            .iter()
            .chain(&self.terminal_observations)
            .chain(&self.rewards)
            .any(|x| !x.is_finite())
        {
            return Err(Error::NonFinite("dataset entry".into()));
        }
        Ok(())
    }
}

/// Hidden confounders and simulator state, kept apart from [`Dataset`].
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTable {
    /// Trajectory confounders `u_i` (the group label `S_i` for tumor growth).
    pub u: Vec<f64>,
    /// Time confounders `w_t` (`sin(0.1 pi t)` for tumor growth).
    pub w: Vec<f64>,
    /// Per-patient PK-PD state, tumor growth only.
    pub patients: Vec<TumorPatient>,
    /// Trajectories whose tumor volume hit the positivity clamp.
    pub clamped: Vec<bool>,
}

impl LatentTable {
    pub fn cell(&self, i: usize, t: usize) -> CellLatents {
        CellLatents { u: self.u[i], w: self.w[t] }
    }
}

/// Draws the latent confounders for `config` from the latent streams.
pub fn draw_latents(config: &EnvConfig) -> Result<LatentTable> {
    config.validate()?;
    let streams = Streams::new(config.seed);
    let n = config.n_trajectories;
    let horizon = config.horizon;
    Ok(match config.kind {
        EnvKind::Linear | EnvKind::DynamicProcess => {
            let s = config.latent_scale;
            let u = (0..n)
                .map(|i| s * rng::normal(&mut streams.stream(Purpose::LatentU, i as u64)))
                .collect();
            let mut wr = streams.stream(Purpose::LatentW, 0);
            let w = (0..horizon).map(|_| s * rng::normal(&mut wr)).collect();
            LatentTable { u, w, patients: Vec::new(), clamped: vec![false; n] }
        }
        EnvKind::TumorGrowth => {
            let patients: Vec<TumorPatient> = (0..n)
                .map(|i| {
                    config
                        .tumor
                        .draw_patient(&mut streams.stream(Purpose::LatentU, i as u64))
                })
                .collect();
            LatentTable {
                u: patients.iter().map(|p| p.group as f64).collect(),
                w: (0..horizon).map(tumor::time_confounder).collect(),
                patients,
                clamped: vec![false; n],
            }
        }
    })
}

/// Per-trajectory simulator state advanced one step at a time.
#[derive(Debug, Clone)]
pub(crate) struct StepOutcome {
    pub reward: f64,
    pub next_obs: Vec<f64>,
    pub clamped: bool,
}

/// One transition of the true dynamics. `t` is the 0-based time index.
pub(crate) fn true_step(
    config: &EnvConfig,
    obs: &[f64],
    action: usize,
    latents: CellLatents,
    patient: Option<&TumorPatient>,
    t: usize,
    noise: &mut StreamRng,
) -> StepOutcome {
    match config.kind {
        EnvKind::Linear => linear::step(config, obs, action, latents, noise),
        EnvKind::DynamicProcess => dynamic::step(config, obs, action, latents, noise),
        EnvKind::TumorGrowth => tumor::step(
            config,
            obs,
            action,
            latents,
            patient.expect("tumor step requires patient parameters"),
            t,
            noise,
        ),
    }
}

pub(crate) fn initial_observation(config: &EnvConfig, rng: &mut StreamRng) -> Vec<f64> {
    match config.kind {
        EnvKind::Linear => vec![rng::normal(rng) * config.noise_scale],
        EnvKind::DynamicProcess => (0..4).map(|_| rng::normal(rng) * config.noise_scale).collect(),
        EnvKind::TumorGrowth => config.tumor.initial_state(rng),
    }
}

/// Runs the dynamics for the latents in `latents`, writing clamp flags back.
///
/// Random draws per trajectory `i`: initial observation from stream
/// `(InitialObs, i)`, actions from `(Action, i)` (one uniform per step), and
/// transition noise from `(TransitionNoise, i)`.
pub fn simulate(
    config: &EnvConfig,
    policy: &PolicySpec,
    latents: &mut LatentTable,
) -> Result<Dataset> {
    config.validate()?;
    let n = config.n_trajectories;
    let horizon = config.horizon;
    if latents.u.len() != n || latents.w.len() != horizon {
        return Err(Error::dim("latent table does not match (N, T)"));
    }
    if config.kind == EnvKind::TumorGrowth && latents.patients.len() != n {
        return Err(Error::dim("tumor latent table needs one patient record per trajectory"));
    }
    policy.check_env(config.kind)?;
    let streams = Streams::new(config.seed);
    let mut data = Dataset::empty(config.kind, n, horizon);
    let d = data.obs_dim;
    latents.clamped = vec![false; n];
    for i in 0..n {
        let mut init = streams.stream(Purpose::InitialObs, i as u64);
        let mut act = streams.stream(Purpose::Action, i as u64);
        let mut noise = streams.stream(Purpose::TransitionNoise, i as u64);
        let mut obs = initial_observation(config, &mut init);
        let patient = latents.patients.get(i).cloned();
        for t in 0..horizon {
            let cell = latents.cell(i, t);
            let lat = matches!(policy, PolicySpec::Behavior).then_some(&cell);
            let probs = policy_prob(config, policy, &obs, t, lat)?;
            let a = rng::categorical(&mut act, &probs);
            let out = true_step(config, &obs, a, cell, patient.as_ref(), t, &mut noise);
            let c = data.cell(i, t);
            data.observations[c * d..(c + 1) * d].copy_from_slice(&obs);
            data.actions[c] = a;
            data.rewards[c] = out.reward;
            latents.clamped[i] |= out.clamped;
            obs = out.next_obs;
        }
        data.terminal_observations[i * d..(i + 1) * d].copy_from_slice(&obs);
    }
    Ok(data)
}

/// Draws latents and simulates under `policy`. Deterministic in `config.seed`.
pub fn generate(config: &EnvConfig, policy: &PolicySpec) -> Result<(Dataset, LatentTable)> {
    let mut latents = draw_latents(config)?;
    let data = simulate(config, policy, &mut latents)?;
    Ok((data, latents))
}

pub fn gen_linear(config: &EnvConfig, policy: &PolicySpec) -> Result<(Dataset, LatentTable)> {
    config.expect_kind(EnvKind::Linear)?;
    generate(config, policy)
}

pub fn gen_dynamic_process(
    config: &EnvConfig,
    policy: &PolicySpec,
) -> Result<(Dataset, LatentTable)> {
    config.expect_kind(EnvKind::DynamicProcess)?;
    generate(config, policy)
}

pub fn gen_tumor(config: &EnvConfig, policy: &PolicySpec) -> Result<(Dataset, LatentTable)> {
    config.expect_kind(EnvKind::TumorGrowth)?;
    generate(config, policy)
}

/// Monte Carlo policy value with standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyValue {
    pub value: f64,
    pub std_error: f64,
}

/// Ground-truth value of a latent-free target policy.
///
/// Each rollout is an independent trajectory with fresh latents (a fresh `u`
/// and a fresh `w_1..w_T` sequence) drawn from stream `(GroundTruth, j)`;
/// the latents enter the dynamics but never the actions. Returns the mean of
/// the per-rollout average reward and its standard error.
pub fn true_policy_value(
    config: &EnvConfig,
    policy: &PolicySpec,
    n_rollouts: usize,
    seed: u64,
) -> Result<PolicyValue> {
    config.validate()?;
    if n_rollouts < 1 {
        return Err(Error::config("n_rollouts must be >= 1"));
    }
    let target = TargetPolicy::new(policy.clone(), config.kind)?;
    let streams = Streams::new(seed);
    let horizon = config.horizon;
    let mut means = Vec::with_capacity(n_rollouts);
    for j in 0..n_rollouts {
        let mut rng = streams.stream(Purpose::GroundTruth, j as u64);
        let (u, w, patient) = match config.kind {
            EnvKind::TumorGrowth => {
                let p = config.tumor.draw_patient(&mut rng);
                let w: Vec<f64> = (0..horizon).map(tumor::time_confounder).collect();
                (p.group as f64, w, Some(p))
            }
            _ => {
                let s = config.latent_scale;
                let u = s * rng::normal(&mut rng);
                let w: Vec<f64> = (0..horizon).map(|_| s * rng::normal(&mut rng)).collect();
                (u, w, None)
            }
        };
        let mut obs = initial_observation(config, &mut rng);
        let mut total = 0.0;
        for (t, &wt) in w.iter().enumerate() {
            let a = rng::categorical(&mut rng, &target.probs(&obs));
            let out = true_step(config, &obs, a, CellLatents { u, w: wt }, patient.as_ref(), t, &mut rng);
            total += out.reward;
            obs = out.next_obs;
        }
        means.push(total / horizon as f64);
    }
    let n = n_rollouts as f64;
    let value = means.iter().sum::<f64>() / n;
    let var = if n_rollouts > 1 {
        means.iter().map(|m| (m - value).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Ok(PolicyValue { value, std_error: (var / n).sqrt() })
}

/// The true simulator with known latents, usable wherever a learned
/// transition model is expected.
#[derive(Debug, Clone)]
pub struct TrueDynamics {
    pub config: EnvConfig,
    pub latents: LatentTable,
}

impl TrueDynamics {
    pub fn new(config: EnvConfig, latents: LatentTable) -> Result<Self> {
        config.validate()?;
        if latents.u.len() != config.n_trajectories || latents.w.len() != config.horizon {
            return Err(Error::dim("latent table does not match (N, T)"));
        }
        Ok(Self { config, latents })
    }
}

impl TransitionModel for TrueDynamics {
    fn obs_dim(&self) -> usize {
        self.config.kind.obs_dim()
    }

    fn n_trajectories(&self) -> usize {
        self.latents.u.len()
    }

    fn horizon(&self) -> usize {
        self.latents.w.len()
    }

    fn action_space(&self) -> ActionSpace {
        self.config.kind.action_space()
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
        for (b, &i) in trajs.iter().enumerate() {
            let out = true_step(
                &self.config,
                &obs[b * d..(b + 1) * d],
                actions[b],
                self.latents.cell(i, t),
                self.latents.patients.get(i),
                t,
                &mut rngs[b],
            );
            rewards[b] = out.reward;
            next_obs[b * d..(b + 1) * d].copy_from_slice(&out.next_obs);
        }
        Ok(())
    }
}

/// Value of `policy` conditional on the dataset's initial observations and
/// the true latents, by rollouts of the true simulator.
pub fn conditional_policy_value(
    config: &EnvConfig,
    dataset: &Dataset,
    latents: &LatentTable,
    policy: &PolicySpec,
    rollouts_per_traj: usize,
    seed: u64,
) -> Result<ValueEstimate> {
    let model = TrueDynamics::new(config.clone(), latents.clone())?;
    let cfg = crate::ope::OpeConfig {
        n_rollouts_per_traj: rollouts_per_traj,
        target: policy.clone(),
        crossfit: false,
        seed,
    };
    crate::ope::estimate_value(&model, &dataset.initial_observations(), &cfg)
}
