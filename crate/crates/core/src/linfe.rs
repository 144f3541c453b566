//! Linear fixed-effects deconfounders.
//!
//! Each assumption regresses a target (the reward, or one next-observation
//! coordinate) on `Z = [O, A]` plus latent dummies:
//!
//! ```text
//! UUC   one dummy per (i, t)        p = k + N T
//! OWUC  one dummy per trajectory    p = k + N
//! TWUC  trajectory + time dummies   p = k + N + T
//! ```
//!
//! where `k = obs_dim + 1`. Fits are minimum-norm least squares. The
//! structured solver in [`fit_lse`] never materializes `X`; [`fit_lse_dense`]
//! runs an SVD pseudo-inverse on the explicit matrix for small systems and
//! serves as its cross-check.

use nalgebra::{DMatrix, DVector};

use crate::env::{
    ActionSpace, CellLatents, Dataset, EnvKind, LatentTable, PolicySpec, TargetPolicy,
};
use crate::ope::{self, OpeConfig, TransitionModel, ValueEstimate};
use crate::rng::{self, StreamRng};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AssumptionKind {
    Uuc,
    Owuc,
    Twuc,
}

impl AssumptionKind {
    pub const ALL: [AssumptionKind; 3] = [AssumptionKind::Uuc, AssumptionKind::Owuc, AssumptionKind::Twuc];

    pub fn name(self) -> &'static str {
        match self {
            AssumptionKind::Uuc => "UUC",
            AssumptionKind::Owuc => "OWUC",
            AssumptionKind::Twuc => "TWUC",
        }
    }
}

/// Regression target.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitTarget {
    Reward,
    NextObs(usize),
}

/// Meaning of one column of the design matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Column {
    /// Coefficient on regressor `j` of `Z` (observation coordinates, then action).
    Zeta(usize),
    Cell { traj: usize, time: usize },
    Traj(usize),
    Time(usize),
}

impl Column {
    pub fn name(&self) -> String {
        match self {
            Column::Zeta(j) => format!("zeta{}", j + 1),
            Column::Cell { traj, time } => format!("z[{traj},{time}]"),
            Column::Traj(i) => format!("u[{i}]"),
            Column::Time(t) => format!("w[{t}]"),
        }
    }
}

/// Default cap on `N * T`.
pub const DEFAULT_MAX_CELLS: usize = 4_000_000;
/// Cap on `rows * p` for the dense solver.
pub const DENSE_MAX_ENTRIES: usize = 4_000_000;

/// Least-squares system `Y = X beta`, stored by structure.
///
/// Rows are in `(i, t)` lexicographic order. `X = [Z | dummies]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignSystem {
    pub kind: AssumptionKind,
    pub n: usize,
    pub t: usize,
    /// `NT x k` regressors.
    pub z: DMatrix<f64>,
    pub y: DVector<f64>,
    pub column_map: Vec<Column>,
}

impl DesignSystem {
    pub fn rows(&self) -> usize {
        self.n * self.t
    }

    pub fn n_regressors(&self) -> usize {
        self.z.ncols()
    }

    pub fn p(&self) -> usize {
        self.column_map.len()
    }

    /// Explicit `X`; fails with [`Error::TooLarge`] past `max_entries`.
    pub fn to_dense(&self, max_entries: usize) -> Result<DMatrix<f64>> {
        let entries = self.rows().saturating_mul(self.p());
        if entries > max_entries {
            return Err(Error::TooLarge { cells: entries, limit: max_entries });
        }
        let k = self.n_regressors();
        let mut x = DMatrix::zeros(self.rows(), self.p());
        x.columns_mut(0, k).copy_from(&self.z);
        for (c, col) in self.column_map.iter().enumerate().skip(k) {
            match *col {
                Column::Cell { traj, time } => x[(traj * self.t + time, c)] = 1.0,
                Column::Traj(i) => {
                    for t in 0..self.t {
                        x[(i * self.t + t, c)] = 1.0;
                    }
                }
                Column::Time(t) => {
                    for i in 0..self.n {
                        x[(i * self.t + t, c)] = 1.0;
                    }
                }
                Column::Zeta(_) => unreachable!("regressor columns come first"),
            }
        }
        Ok(x)
    }

    /// `X beta` without materializing `X`.
    pub fn apply(&self, beta: &DVector<f64>) -> DVector<f64> {
        let k = self.n_regressors();
        let mut out = &self.z * beta.rows(0, k);
        let (n, t) = (self.n, self.t);
        match self.kind {
            AssumptionKind::Uuc => out += beta.rows(k, n * t),
            AssumptionKind::Owuc => {
                for i in 0..n {
                    for s in 0..t {
                        out[i * t + s] += beta[k + i];
                    }
                }
            }
            AssumptionKind::Twuc => {
                for i in 0..n {
                    for s in 0..t {
                        out[i * t + s] += beta[k + i] + beta[k + n + s];
                    }
                }
            }
        }
        out
    }

    /// `X^T v` without materializing `X`.
    pub fn apply_transpose(&self, v: &DVector<f64>) -> DVector<f64> {
        let k = self.n_regressors();
        let (n, t) = (self.n, self.t);
        let mut out = DVector::zeros(self.p());
        out.rows_mut(0, k).copy_from(&(self.z.transpose() * v));
        match self.kind {
            AssumptionKind::Uuc => out.rows_mut(k, n * t).copy_from(v),
            AssumptionKind::Owuc | AssumptionKind::Twuc => {
                for i in 0..n {
                    for s in 0..t {
                        out[k + i] += v[i * t + s];
                        if self.kind == AssumptionKind::Twuc {
                            out[k + n + s] += v[i * t + s];
                        }
                    }
                }
            }
        }
        out
    }
}

/// Target vector of `data` in `(i, t)` order.
pub fn target_vector(data: &Dataset, target: FitTarget) -> Result<DVector<f64>> {
    let (n, t) = (data.n, data.t);
    Ok(match target {
        FitTarget::Reward => DVector::from_column_slice(&data.rewards),
        FitTarget::NextObs(j) => {
            if j >= data.obs_dim {
                return Err(Error::dim(format!("observation coordinate {j} out of range")));
            }
            DVector::from_fn(n * t, |c, _| data.next_obs(c / t, c % t)[j])
        }
    })
}

/// Builds the design for `target` under `kind`.
pub fn build_design(
    data: &Dataset,
    kind: AssumptionKind,
    target: FitTarget,
    max_cells: usize,
) -> Result<DesignSystem> {
    data.validate()?;
    if data.action_space() != ActionSpace::Binary {
        return Err(Error::config("linear fixed-effects models need a binary action"));
    }
    let (n, t) = (data.n, data.t);
    let cells = n.saturating_mul(t);
    if cells > max_cells {
        return Err(Error::TooLarge { cells, limit: max_cells });
    }
    let d = data.obs_dim;
    let k = d + 1;
    let mut z = DMatrix::zeros(cells, k);
    for c in 0..cells {
        let (i, s) = (c / t, c % t);
        for j in 0..d {
            z[(c, j)] = data.obs(i, s)[j];
        }
        z[(c, d)] = data.action(i, s) as f64;
    }
    let mut column_map: Vec<Column> = (0..k).map(Column::Zeta).collect();
    match kind {
        AssumptionKind::Uuc => {
            column_map.extend((0..cells).map(|c| Column::Cell { traj: c / t, time: c % t }))
        }
        AssumptionKind::Owuc => column_map.extend((0..n).map(Column::Traj)),
        AssumptionKind::Twuc => {
            column_map.extend((0..n).map(Column::Traj));
            column_map.extend((0..t).map(Column::Time));
        }
    }
    Ok(DesignSystem { kind, n, t, z, y: target_vector(data, target)?, column_map })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LseFit {
    pub beta_hat: DVector<f64>,
    pub fitted: DVector<f64>,
    pub rank: usize,
    pub pinv_tolerance: f64,
}

impl LseFit {
    /// Residual variance `|Y - fitted|^2 / max(NT - rank, 1)`.
    pub fn residual_variance(&self, y: &DVector<f64>) -> f64 {
        let dof = y.len().saturating_sub(self.rank).max(1);
        (y - &self.fitted).norm_squared() / dof as f64
    }
}

fn check_finite(sys: &DesignSystem, ys: &[DVector<f64>]) -> Result<()> {
    if sys.rows() == 0 {
        return Err(Error::dim("empty design"));
    }
    if sys.z.iter().chain(ys.iter().flat_map(|y| y.iter())).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("design matrix or response".into()));
    }
    if ys.iter().any(|y| y.len() != sys.rows()) {
        return Err(Error::dim("response length does not match design rows"));
    }
    Ok(())
}

/// Minimum-norm least squares by SVD pseudo-inverse of the explicit `X`,
/// singular values below `p * eps * sigma_max` treated as zero.
pub fn fit_lse_dense(sys: &DesignSystem) -> Result<LseFit> {
    check_finite(sys, std::slice::from_ref(&sys.y))?;
    let x = sys.to_dense(DENSE_MAX_ENTRIES)?;
    let p = x.ncols();
    let svd = x.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let tol = p as f64 * f64::EPSILON * smax;
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    let beta_hat = svd.solve(&sys.y, tol).map_err(|e| Error::NonFinite(e.to_string()))?;
    let fitted = &x * &beta_hat;
    Ok(LseFit { beta_hat, fitted, rank, pinv_tolerance: tol })
}

/// Minimum-norm least squares exploiting the dummy structure.
pub fn fit_lse(sys: &DesignSystem) -> Result<LseFit> {
    Ok(fit_lse_multi(sys, std::slice::from_ref(&sys.y))?.remove(0))
}

/// Trajectory means and time means of an `NT` vector.
fn panel_means(v: &[f64], n: usize, t: usize) -> (Vec<f64>, Vec<f64>, f64) {
    let mut by_traj = vec![0.0; n];
    let mut by_time = vec![0.0; t];
    for i in 0..n {
        for s in 0..t {
            by_traj[i] += v[i * t + s] / t as f64;
            by_time[s] += v[i * t + s] / n as f64;
        }
    }
    let all = by_traj.iter().sum::<f64>() / n as f64;
    (by_traj, by_time, all)
}

/// Removes the span of the dummy block from each column.
fn within(kind: AssumptionKind, m: &DMatrix<f64>, n: usize, t: usize) -> DMatrix<f64> {
    let mut out = m.clone();
    for c in 0..m.ncols() {
        let col = m.column(c);
        let (bt, bs, all) = panel_means(col.as_slice(), n, t);
        for i in 0..n {
            for s in 0..t {
                out[(i * t + s, c)] -= match kind {
                    AssumptionKind::Owuc => bt[i],
                    _ => bt[i] + bs[s] - all,
                };
            }
        }
    }
    out
}

/// Largest singular value of `X` by power iteration on `X^T X`.
fn sigma_max(sys: &DesignSystem) -> f64 {
    let mut v = DVector::from_element(sys.p(), 1.0 / (sys.p() as f64).sqrt());
    let mut lambda = 0.0;
    for _ in 0..200 {
        let w = sys.apply_transpose(&sys.apply(&v));
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        let converged = (norm - lambda).abs() <= 1e-12 * norm;
        lambda = norm;
        v = w / norm;
        if converged {
            break;
        }
    }
    lambda.sqrt()
}

/// Shared-factorization fit of several responses against one design.
pub fn fit_lse_multi(sys: &DesignSystem, ys: &[DVector<f64>]) -> Result<Vec<LseFit>> {
    check_finite(sys, ys)?;
    let (n, t) = (sys.n, sys.t);
    let k = sys.n_regressors();
    let p = sys.p();
    let tol = p as f64 * f64::EPSILON * sigma_max(sys);
    match sys.kind {
        AssumptionKind::Uuc => {
            // X = [Z I] has full row rank: beta = X^T (X X^T)^{-1} Y and by
            // Woodbury (I + Z Z^T)^{-1} = I - Z (I + Z^T Z)^{-1} Z^T.
            let g = DMatrix::identity(k, k) + sys.z.transpose() * &sys.z;
            let chol = g.cholesky().ok_or_else(|| Error::NonFinite("I + Z'Z not positive definite".into()))?;
            Ok(ys
                .iter()
                .map(|y| {
                    let zeta = chol.solve(&(sys.z.transpose() * y));
                    let v = y - &sys.z * &zeta;
                    let mut beta_hat = DVector::zeros(p);
                    beta_hat.rows_mut(0, k).copy_from(&zeta);
                    beta_hat.rows_mut(k, n * t).copy_from(&v);
                    let fitted = sys.apply(&beta_hat);
                    LseFit { beta_hat, fitted, rank: n * t, pinv_tolerance: tol }
                })
                .collect())
        }
        kind => {
            let zt = within(kind, &sys.z, n, t);
            let svd = zt.clone().svd(true, true);
            let v_t = svd.v_t.as_ref().expect("svd computed with V");
            let null: Vec<DVector<f64>> = svd
                .singular_values
                .iter()
                .enumerate()
                .filter(|(_, &s)| s <= tol)
                .map(|(j, _)| v_t.row(j).transpose())
                .collect();
            // Null space of X: gauge vector plus one vector per direction `a`
            // with `Z a` inside the dummy span.
            let mut basis: Vec<DVector<f64>> = Vec::new();
            if kind == AssumptionKind::Twuc {
                let mut g = DVector::zeros(p);
                g.rows_mut(k, n).fill(1.0);
                g.rows_mut(k + n, t).fill(-1.0);
                basis.push(g);
            }
            for a in &null {
                let za = &sys.z * a;
                let (bt, bs, all) = panel_means(za.as_slice(), n, t);
                let mut v = DVector::zeros(p);
                v.rows_mut(0, k).copy_from(a);
                for i in 0..n {
                    v[k + i] = -bt[i];
                }
                if kind == AssumptionKind::Twuc {
                    for s in 0..t {
                        v[k + n + s] = -(bs[s] - all);
                    }
                }
                basis.push(v);
            }
            let q = orthonormalize(basis);
            let rank = p - q.len();
            ys.iter()
                .map(|y| {
                    let yt = within(kind, &DMatrix::from_column_slice(y.len(), 1, y.as_slice()), n, t);
                    let zeta = svd.solve(&yt, tol).map_err(|e| Error::NonFinite(e.to_string()))?;
                    let zeta = zeta.column(0).into_owned();
                    let resid = y - &sys.z * &zeta;
                    let (bt, bs, all) = panel_means(resid.as_slice(), n, t);
                    let mut beta = DVector::zeros(p);
                    beta.rows_mut(0, k).copy_from(&zeta);
                    for i in 0..n {
                        beta[k + i] = bt[i];
                    }
                    if kind == AssumptionKind::Twuc {
                        for s in 0..t {
                            beta[k + n + s] = bs[s] - all;
                        }
                    }
                    for qv in &q {
                        let c = qv.dot(&beta);
                        beta -= qv * c;
                    }
                    let fitted = sys.apply(&beta);
                    Ok(LseFit { beta_hat: beta, fitted, rank, pinv_tolerance: tol })
                })
                .collect()
        }
    }
}

fn orthonormalize(vs: Vec<DVector<f64>>) -> Vec<DVector<f64>> {
    let mut out: Vec<DVector<f64>> = Vec::new();
    for mut v in vs {
        for q in &out {
            let c = q.dot(&v);
            v -= q * c;
        }
        let norm = v.norm();
        if norm > 1e-10 {
            out.push(v / norm);
        }
    }
    out
}

/// `(1/NT) |fitted - truth|^2`.
pub fn prediction_mse(fit: &LseFit, truth: &[f64]) -> Result<f64> {
    if truth.len() != fit.fitted.len() {
        return Err(Error::dim("truth length does not match fitted values"));
    }
    Ok(fit.fitted.iter().zip(truth).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / truth.len() as f64)
}

/// Closed-form prediction MSE: `sigma2` (UUC), `sigma2 (N+T+2)/(NT)` (TWUC),
/// and the asymptotic floor `var_w` for the misspecified one-way model.
pub fn theoretical_mse(kind: AssumptionKind, sigma2: f64, n: usize, t: usize, var_w: f64) -> f64 {
    match kind {
        AssumptionKind::Uuc => sigma2,
        AssumptionKind::Twuc => sigma2 * (n + t + 2) as f64 / (n * t) as f64,
        AssumptionKind::Owuc => var_w,
    }
}

/// Finite-`T` one-way floor `(1/T) sum (W_t - mean W)^2` of a time effect.
pub fn owuc_floor(time_effect: &[f64]) -> f64 {
    let t = time_effect.len() as f64;
    let mean = time_effect.iter().sum::<f64>() / t;
    time_effect.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / t
}

/// Additive time effect of the linear env's reward (`2 w_t`).
pub fn linear_time_effect(latents: &LatentTable) -> Vec<f64> {
    latents.w.iter().map(|w| 2.0 * w).collect()
}

/// Conditional means `E[target | O, A, u, w]` of the linear env, per cell.
pub fn linear_conditional_means(data: &Dataset, latents: &LatentTable, target: FitTarget) -> Result<Vec<f64>> {
    if data.kind != EnvKind::Linear {
        return Err(Error::config("conditional means are available for the linear env only"));
    }
    if matches!(target, FitTarget::NextObs(j) if j > 0) {
        return Err(Error::dim("linear env has a single observation coordinate"));
    }
    Ok((0..data.n * data.t)
        .map(|c| {
            let (i, t) = (c / data.t, c % data.t);
            let (o, a, l) = (data.obs(i, t)[0], data.action(i, t), latents.cell(i, t));
            match target {
                FitTarget::Reward => crate::env::linear_reward_mean(o, a, l),
                FitTarget::NextObs(_) => crate::env::linear_next_obs_mean(o, a, l),
            }
        })
        .collect())
}

/// Probability of `A = 1` under an observation-independent binary policy.
fn constant_treat_prob(policy: &PolicySpec, kind: EnvKind) -> Result<f64> {
    let target = TargetPolicy::new(policy.clone(), kind)?;
    let p = target.probs(&[0.0])[1];
    if [-10.0, 1.0, 10.0].iter().any(|&o| target.probs(&[o])[1] != p) {
        return Err(Error::Policy("closed-form value needs an observation-independent policy".into()));
    }
    Ok(p)
}

/// Value of `policy` in the linear env conditional on the dataset's `O_{i,1}`
/// and the realized latents, by unrolling the mean recursion exactly.
pub fn linear_conditional_value(data: &Dataset, latents: &LatentTable, policy: &PolicySpec) -> Result<f64> {
    if data.kind != EnvKind::Linear {
        return Err(Error::config("closed-form value is available for the linear env only"));
    }
    let p = constant_treat_prob(policy, EnvKind::Linear)?;
    let mut total = 0.0;
    for i in 0..data.n {
        let mut o = data.initial_obs(i)[0];
        for t in 0..data.t {
            let l: CellLatents = latents.cell(i, t);
            total += o + 3.0 * p + 2.0 * l.u + 2.0 * l.w;
            o = 0.7 * o + p + 2.0 * l.u + 2.0 * l.w - 0.5;
        }
    }
    Ok(total / (data.n * data.t) as f64)
}

/// Latent estimates read off a fit through the column map.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedEffects {
    pub n: usize,
    pub t: usize,
    pub zeta: Vec<f64>,
    /// Per-cell effects (UUC only), `(i, t)` order.
    pub cell: Option<Vec<f64>>,
    /// Trajectory effects `u_i` (zeros under UUC).
    pub traj: Vec<f64>,
    /// Time effects `w_t` (zeros unless TWUC).
    pub time: Vec<f64>,
}

impl FixedEffects {
    pub fn from_fit(sys: &DesignSystem, fit: &LseFit) -> Self {
        let mut fe = FixedEffects {
            n: sys.n,
            t: sys.t,
            zeta: Vec::new(),
            cell: (sys.kind == AssumptionKind::Uuc).then(|| vec![0.0; sys.rows()]),
            traj: vec![0.0; sys.n],
            time: vec![0.0; sys.t],
        };
        for (col, &b) in sys.column_map.iter().zip(fit.beta_hat.iter()) {
            match *col {
                Column::Zeta(_) => fe.zeta.push(b),
                Column::Cell { traj, time } => fe.cell.as_mut().unwrap()[traj * sys.t + time] = b,
                Column::Traj(i) => fe.traj[i] = b,
                Column::Time(t) => fe.time[t] = b,
            }
        }
        fe
    }

    pub fn effect(&self, i: usize, t: usize) -> f64 {
        match &self.cell {
            Some(c) => c[i * self.t + t],
            None => self.traj[i] + self.time[t],
        }
    }

    /// Linear predictor at regressors `z = [o; a]`.
    pub fn predict(&self, z: &[f64], i: usize, t: usize) -> f64 {
        self.zeta.iter().zip(z).map(|(a, b)| a * b).sum::<f64>() + self.effect(i, t)
    }
}

/// Fitted linear transition model: a Gaussian regression for the reward and
/// each observation coordinate, with plugged-in fixed effects.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearFeModel {
    pub kind: AssumptionKind,
    pub obs_dim: usize,
    /// Index 0 is the reward, then observation coordinates.
    pub effects: Vec<FixedEffects>,
    /// Residual standard deviations, same order as `effects`.
    pub noise_sd: Vec<f64>,
    /// Prediction of each target on the training rows.
    pub fits: Vec<LseFit>,
}

impl LinearFeModel {
    /// Fits the reward and every next-observation coordinate.
    pub fn fit(data: &Dataset, kind: AssumptionKind, max_cells: usize) -> Result<Self> {
        let sys = build_design(data, kind, FitTarget::Reward, max_cells)?;
        let mut ys = vec![sys.y.clone()];
        for j in 0..data.obs_dim {
            ys.push(target_vector(data, FitTarget::NextObs(j))?);
        }
        let fits = fit_lse_multi(&sys, &ys)?;
        let effects = fits.iter().map(|f| FixedEffects::from_fit(&sys, f)).collect();
        let noise_sd = fits.iter().zip(&ys).map(|(f, y)| f.residual_variance(y).sqrt()).collect();
        Ok(Self { kind, obs_dim: data.obs_dim, effects, noise_sd, fits })
    }

    pub fn reward_fit(&self) -> &LseFit {
        &self.fits[0]
    }
}

impl TransitionModel for LinearFeModel {
    fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    fn n_trajectories(&self) -> usize {
        self.effects[0].n
    }

    fn horizon(&self) -> usize {
        self.effects[0].t
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::Binary
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
        let d = self.obs_dim;
        let mut z = vec![0.0; d + 1];
        for (b, &i) in trajs.iter().enumerate() {
            z[..d].copy_from_slice(&obs[b * d..(b + 1) * d]);
            z[d] = actions[b] as f64;
            let rng = &mut rngs[b];
            rewards[b] = self.effects[0].predict(&z, i, t) + self.noise_sd[0] * rng::normal(rng);
            for j in 0..d {
                next_obs[b * d + j] =
                    self.effects[1 + j].predict(&z, i, t) + self.noise_sd[1 + j] * rng::normal(rng);
            }
        }
        Ok(())
    }
}

/// Plug-in value of `cfg.target` under a fitted linear model, rolled out
/// from the dataset's initial observations.
pub fn linear_ope(model: &LinearFeModel, data: &Dataset, cfg: &OpeConfig) -> Result<ValueEstimate> {
    if cfg.target.is_behavior() {
        return Err(Error::Policy("target policy must not depend on latents".into()));
    }
    ope::estimate_value(model, &data.initial_observations(), cfg)
}

/// One row of the replication table.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationRow {
    pub seed: u64,
    pub assumption: AssumptionKind,
    pub n: usize,
    pub t: usize,
    pub train_mse: f64,
    pub theory_mse: f64,
    pub ope_mse: f64,
}

pub const REPLICATION_HEADER: &str = "seed,assumption,N,T,train_mse,theory_mse,ope_mse";

impl ReplicationRow {
    pub fn csv_line(&self) -> String {
        use crate::env::io::fmt_f64;
        format!(
            "{},{},{},{},{},{},{}",
            self.seed,
            self.assumption.name(),
            self.n,
            self.t,
            fmt_f64(self.train_mse),
            fmt_f64(self.theory_mse),
            fmt_f64(self.ope_mse)
        )
    }
}

/// One replication of the linear comparison on a dataset already drawn from
/// the linear env: fits every assumption, reports the reward prediction MSE
/// against the true conditional means, the closed-form reference, and the
/// squared error of the plug-in value against the conditional truth.
pub fn replicate(
    data: &Dataset,
    latents: &LatentTable,
    reward_var: f64,
    cfg: &OpeConfig,
    seed: u64,
) -> Result<Vec<ReplicationRow>> {
    let truth = linear_conditional_means(data, latents, FitTarget::Reward)?;
    let eta = linear_conditional_value(data, latents, &cfg.target)?;
    let floor = owuc_floor(&linear_time_effect(latents));
    AssumptionKind::ALL
        .iter()
        .map(|&kind| {
            let model = LinearFeModel::fit(data, kind, DEFAULT_MAX_CELLS)?;
            let train_mse = prediction_mse(model.reward_fit(), &truth)?;
            let eta_hat = linear_ope(&model, data, cfg)?.value;
            Ok(ReplicationRow {
                seed,
                assumption: kind,
                n: data.n,
                t: data.t,
                train_mse,
                theory_mse: theoretical_mse(kind, reward_var, data.n, data.t, floor),
                ope_mse: (eta_hat - eta).powi(2),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{generate, EnvConfig};

    fn toy(n: usize, t: usize, seed: u64) -> (Dataset, LatentTable) {
        generate(&EnvConfig::new(EnvKind::Linear, n, seed).with_horizon(t), &PolicySpec::Behavior).unwrap()
    }

    fn raw_system(x: DMatrix<f64>, y: &[f64]) -> (DMatrix<f64>, DVector<f64>) {
        (x, DVector::from_column_slice(y))
    }

    fn min_norm(x: &DMatrix<f64>, y: &DVector<f64>) -> DVector<f64> {
        let p = x.ncols();
        let svd = x.clone().svd(true, true);
        let tol = p as f64 * f64::EPSILON * svd.singular_values.max();
        svd.solve(y, tol).unwrap()
    }

    #[test]
    fn identity_and_rank_deficient_pinv() {
        let (x, y) = raw_system(DMatrix::identity(2, 2), &[3.0, -1.0]);
        assert_eq!(min_norm(&x, &y), DVector::from_column_slice(&[3.0, -1.0]));
        let (x, y) = raw_system(DMatrix::from_element(2, 2, 1.0), &[2.0, 2.0]);
        let b = min_norm(&x, &y);
        assert!((b[0] - 1.0).abs() < 1e-14 && (b[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn design_shapes() {
        let (d, _) = toy(2, 2, 1);
        let sys = build_design(&d, AssumptionKind::Twuc, FitTarget::Reward, DEFAULT_MAX_CELLS).unwrap();
        assert_eq!(sys.p(), 6);
        let x = sys.to_dense(1000).unwrap();
        let block = x.columns(2, 4).into_owned();
        let expect = DMatrix::from_row_slice(
            4,
            4,
            &[1., 0., 1., 0., 1., 0., 0., 1., 0., 1., 1., 0., 0., 1., 0., 1.],
        );
        assert_eq!(block, expect);
        let (d, _) = toy(1, 1, 1);
        let sys = build_design(&d, AssumptionKind::Uuc, FitTarget::Reward, DEFAULT_MAX_CELLS).unwrap();
        assert_eq!(sys.p(), 3);
        assert_eq!(sys.to_dense(100).unwrap()[(0, 2)], 1.0);
        let (d, _) = toy(3, 4, 1);
        let sys = build_design(&d, AssumptionKind::Owuc, FitTarget::Reward, DEFAULT_MAX_CELLS).unwrap();
        assert_eq!(sys.p(), 5);
        let x = sys.to_dense(100).unwrap();
        for r in 0..12 {
            assert_eq!(x[(r, 2 + r / 4)], 1.0);
        }
        assert!(matches!(
            build_design(&d, AssumptionKind::Uuc, FitTarget::Reward, 11),
            Err(Error::TooLarge { .. })
        ));
    }

    #[test]
    fn structured_matches_dense() {
        for (n, t, seed) in [(3, 4, 1), (5, 3, 2), (4, 6, 3)] {
            let (d, _) = toy(n, t, seed);
            for kind in AssumptionKind::ALL {
                for target in [FitTarget::Reward, FitTarget::NextObs(0)] {
                    let sys = build_design(&d, kind, target, DEFAULT_MAX_CELLS).unwrap();
                    let a = fit_lse(&sys).unwrap();
                    let b = fit_lse_dense(&sys).unwrap();
                    assert_eq!(a.rank, b.rank, "{kind:?}");
                    let scale = 1.0 + b.beta_hat.amax();
                    assert!((&a.beta_hat - &b.beta_hat).amax() < 1e-9 * scale, "{kind:?} {n} {t}");
                    assert!((&a.fitted - &b.fitted).amax() < 1e-9 * scale);
                }
            }
        }
    }

    #[test]
    fn collinear_regressor_min_norm() {
        // Constant action is collinear with the trajectory dummies.
        let (mut d, _) = toy(4, 5, 9);
        d.actions.iter_mut().for_each(|a| *a = 1);
        for kind in [AssumptionKind::Owuc, AssumptionKind::Twuc] {
            let sys = build_design(&d, kind, FitTarget::Reward, DEFAULT_MAX_CELLS).unwrap();
            let a = fit_lse(&sys).unwrap();
            let b = fit_lse_dense(&sys).unwrap();
            assert_eq!(a.rank, b.rank);
            assert!((&a.beta_hat - &b.beta_hat).amax() < 1e-9, "{kind:?}");
        }
    }

    #[test]
    fn uuc_interpolates_and_normal_equations_hold() {
        let (d, _) = toy(6, 5, 4);
        for kind in AssumptionKind::ALL {
            let sys = build_design(&d, kind, FitTarget::Reward, DEFAULT_MAX_CELLS).unwrap();
            let fit = fit_lse(&sys).unwrap();
            let xty = sys.apply_transpose(&sys.y);
            let r = sys.apply_transpose(&(&sys.y - &fit.fitted));
            assert!(r.amax() <= 1e-8 * xty.norm(), "{kind:?}");
            if kind == AssumptionKind::Uuc {
                assert!((&fit.fitted - &sys.y).amax() < 1e-10);
            }
            assert!((sys.apply(&fit.beta_hat) - &fit.fitted).amax() < 1e-10);
        }
    }

    #[test]
    fn twuc_gauge_leaves_fit_unchanged() {
        let (d, _) = toy(5, 4, 2);
        let sys = build_design(&d, AssumptionKind::Twuc, FitTarget::Reward, DEFAULT_MAX_CELLS).unwrap();
        let fit = fit_lse(&sys).unwrap();
        let mut shifted = fit.beta_hat.clone();
        shifted.rows_mut(2, 5).add_scalar_mut(3.7);
        shifted.rows_mut(7, 4).add_scalar_mut(-3.7);
        assert!((sys.apply(&shifted) - &fit.fitted).amax() < 1e-12);
    }

    #[test]
    fn noiseless_twuc_recovers_truth() {
        let mut cfg = EnvConfig::new(EnvKind::Linear, 6, 3).with_horizon(5);
        cfg.noise_scale = 0.0;
        let (d, l) = generate(&cfg, &PolicySpec::Behavior).unwrap();
        let sys = build_design(&d, AssumptionKind::Twuc, FitTarget::Reward, DEFAULT_MAX_CELLS).unwrap();
        let fit = fit_lse(&sys).unwrap();
        let truth = linear_conditional_means(&d, &l, FitTarget::Reward).unwrap();
        assert!(prediction_mse(&fit, &truth).unwrap() < 1e-20);
    }

    #[test]
    fn theory_values() {
        assert!((theoretical_mse(AssumptionKind::Twuc, 1.0, 100, 50, 0.0) - 0.0304).abs() < 1e-15);
        assert_eq!(theoretical_mse(AssumptionKind::Uuc, 2.0, 7, 3, 0.0), 2.0);
        assert_eq!(theoretical_mse(AssumptionKind::Twuc, 0.0, 7, 3, 0.0), 0.0);
    }

    #[test]
    fn zero_model_has_zero_value() {
        let (d, _) = toy(3, 4, 1);
        let mut m = LinearFeModel::fit(&d, AssumptionKind::Twuc, DEFAULT_MAX_CELLS).unwrap();
        for fe in &mut m.effects {
            fe.zeta.iter_mut().for_each(|z| *z = 0.0);
            fe.traj.iter_mut().for_each(|z| *z = 0.0);
            fe.time.iter_mut().for_each(|z| *z = 0.0);
        }
        m.noise_sd.iter_mut().for_each(|s| *s = 0.0);
        let cfg = OpeConfig::new(PolicySpec::TargetRandom(0.5), 1);
        assert_eq!(linear_ope(&m, &d, &cfg).unwrap().value, 0.0);
    }

    #[test]
    fn deterministic_plug_in_matches_unrolled_recursion() {
        // Noise-free TWUC fit recovers the true coefficients, so the rollout
        // under a never-treat policy follows O' = 0.7 O - 0.5 + 2u + 2w.
        let mut cfg = EnvConfig::new(EnvKind::Linear, 4, 8).with_horizon(6);
        cfg.noise_scale = 0.0;
        let (d, l) = generate(&cfg, &PolicySpec::Behavior).unwrap();
        let m = LinearFeModel::fit(&d, AssumptionKind::Twuc, DEFAULT_MAX_CELLS).unwrap();
        let ocfg = OpeConfig { n_rollouts_per_traj: 2, ..OpeConfig::new(PolicySpec::TargetRandom(0.0), 3) };
        let est = linear_ope(&m, &d, &ocfg).unwrap().value;
        let truth = linear_conditional_value(&d, &l, &PolicySpec::TargetRandom(0.0)).unwrap();
        assert!((est - truth).abs() < 1e-8, "{est} vs {truth}");
    }

    #[test]
    fn closed_form_value_matches_simulated_rollouts() {
        let (d, l) = toy(20, 8, 5);
        let cfg = EnvConfig::new(EnvKind::Linear, 20, 5).with_horizon(8);
        let policy = PolicySpec::TargetRandom(0.5);
        let exact = linear_conditional_value(&d, &l, &policy).unwrap();
        let mc = crate::env::conditional_policy_value(&cfg, &d, &l, &policy, 400, 11).unwrap();
        // Monte Carlo sd of the average is about 0.011 here.
        assert!((exact - mc.value).abs() < 0.06, "{exact} {mc:?}");
    }
}
