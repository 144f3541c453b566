//! Batched forward pass, joint loss and hand-derived gradients.
//!
//! Samples are stored column-wise: a batch of `B` samples is a set of
//! matrices with `B` columns.

use nalgebra::DMatrix;

use super::params::NtnParams;
use crate::env::Dataset;
use crate::{Error, Result};

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn logistic(x: f64) -> f64 {
    crate::env::sigmoid(x)
}

/// `w x + b`, broadcasting the bias column.
fn affine(w: &DMatrix<f64>, b: &DMatrix<f64>, x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut y = w * x;
    for mut col in y.column_iter_mut() {
        col += b.column(0);
    }
    y
}

fn tanh_in_place(m: &mut DMatrix<f64>) {
    m.apply(|x| *x = x.tanh());
}

fn row_sums(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut s = DMatrix::zeros(m.nrows(), 1);
    for col in m.column_iter() {
        s.column_mut(0).add_assign(col);
    }
    s
}

trait AddAssignCol {
    fn add_assign(&mut self, other: nalgebra::DVectorView<'_, f64>);
}

impl AddAssignCol for nalgebra::DVectorViewMut<'_, f64> {
    fn add_assign(&mut self, other: nalgebra::DVectorView<'_, f64>) {
        for (a, b) in self.iter_mut().zip(other.iter()) {
            *a += b;
        }
    }
}

/// A minibatch in network space (normalized observations and targets).
#[derive(Debug, Clone)]
pub struct Batch {
    pub trajs: Vec<usize>,
    pub times: Vec<usize>,
    pub actions: Vec<usize>,
    /// `d_o x B` normalized observations.
    pub obs: DMatrix<f64>,
    /// `(1 + d_o) x B` normalized `(r, o')` targets.
    pub targets: DMatrix<f64>,
}

impl Batch {
    /// Builds a batch from dataset cells (`cell = i * T + t`) using the
    /// model's normalization.
    pub fn from_cells(data: &Dataset, cells: &[usize], params: &NtnParams) -> Self {
        let d = data.obs_dim;
        let b = cells.len();
        let norm = &params.norm;
        let mut obs = DMatrix::zeros(d, b);
        let mut targets = DMatrix::zeros(1 + d, b);
        let mut trajs = Vec::with_capacity(b);
        let mut times = Vec::with_capacity(b);
        let mut actions = Vec::with_capacity(b);
        let mut buf = vec![0.0; d];
        for (col, &c) in cells.iter().enumerate() {
            let (i, t) = (c / data.t, c % data.t);
            norm.norm_obs(data.obs(i, t), &mut buf);
            obs.column_mut(col).copy_from_slice(&buf);
            targets[(0, col)] = norm.norm_reward(data.reward(i, t));
            norm.norm_obs(data.next_obs(i, t), &mut buf);
            for k in 0..d {
                targets[(1 + k, col)] = buf[k];
            }
            trajs.push(i);
            times.push(t);
            actions.push(data.action(i, t));
        }
        Self { trajs, times, actions, obs, targets }
    }

    pub fn len(&self) -> usize {
        self.trajs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajs.is_empty()
    }
}

/// Diagonal Gaussian over `(reward, next observation)` in network space.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionPrediction {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub alpha: f64,
    /// Drop the actor term entirely (TWD-TO ablation).
    pub transition_only: bool,
}

impl LossConfig {
    pub fn joint(alpha: f64) -> Self {
        Self { alpha, transition_only: false }
    }

    pub fn transition_only() -> Self {
        Self { alpha: 0.0, transition_only: true }
    }

    fn weights(&self) -> (f64, f64) {
        if self.transition_only {
            (1.0, 0.0)
        } else {
            (1.0 - self.alpha, self.alpha)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.transition_only && !(0.0..1.0).contains(&self.alpha) {
            return Err(Error::config(format!("loss alpha {} outside [0, 1)", self.alpha)));
        }
        Ok(())
    }
}

/// Summed losses over a batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l_transition: f64,
    pub l_actor: f64,
    pub alpha: f64,
    pub total: f64,
}

/// Intermediate activations kept for the backward pass.
struct Cache {
    tau: DMatrix<f64>,
    u: Option<DMatrix<f64>>,
    w: Option<DMatrix<f64>>,
    q: Option<DMatrix<f64>>,
    z: DMatrix<f64>,
    h: DMatrix<f64>,
    p_in: DMatrix<f64>,
    p1: DMatrix<f64>,
    p2: DMatrix<f64>,
    out: DMatrix<f64>,
    a1: DMatrix<f64>,
    a2: DMatrix<f64>,
    probs: DMatrix<f64>,
}

fn gather_rows(table: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    let d = table.ncols();
    let mut m = DMatrix::zeros(d, idx.len());
    for (col, &r) in idx.iter().enumerate() {
        for k in 0..d {
            m[(k, col)] = table[(r, k)];
        }
    }
    m
}

fn check_indices(params: &NtnParams, trajs: &[usize], times: &[usize]) -> Result<()> {
    if let Some(u) = &params.u_table {
        if trajs.iter().any(|&i| i >= u.nrows()) {
            return Err(Error::dim("trajectory index outside the embedding table"));
        }
    }
    if let Some(w) = &params.w_table {
        if times.iter().any(|&t| t >= w.nrows()) {
            return Err(Error::dim("time index outside the embedding table"));
        }
    }
    Ok(())
}

/// Encoder output for explicit embedding columns.
fn encode_cols(
    params: &NtnParams,
    obs: &DMatrix<f64>,
    u: Option<&DMatrix<f64>>,
    w: Option<&DMatrix<f64>>,
) -> (DMatrix<f64>, Option<DMatrix<f64>>, DMatrix<f64>, DMatrix<f64>) {
    let b = obs.ncols();
    let d = params.arch.embed_dim;
    let mut parts: Vec<&DMatrix<f64>> = vec![obs];
    if let Some(u) = u {
        parts.push(u);
    }
    if let Some(w) = w {
        parts.push(w);
    }
    let rows: usize = parts.iter().map(|m| m.nrows()).sum();
    let mut tau = DMatrix::zeros(rows, b);
    let mut r0 = 0;
    for m in parts {
        tau.view_mut((r0, 0), (m.nrows(), b)).copy_from(m);
        r0 += m.nrows();
    }
    let mut pre = affine(&params.enc_w, &params.enc_b, &tau);
    let mut q_out = None;
    if let Some(bil) = &params.bilinear {
        let (u, w) = (u.expect("ntn uses u"), w.expect("ntn uses w"));
        let mut q = DMatrix::zeros(d * d, b);
        for col in 0..b {
            for a in 0..d {
                for c in 0..d {
                    q[(a * d + c, col)] = u[(a, col)] * w[(c, col)];
                }
            }
        }
        pre += bil * &q;
        q_out = Some(q);
    }
    let mut z = pre;
    tanh_in_place(&mut z);
    let h = affine(&params.f_w, &params.f_b, &z);
    (tau, q_out, z, h)
}

fn forward(params: &NtnParams, batch: &Batch) -> Result<Cache> {
    params.check_dims()?;
    check_indices(params, &batch.trajs, &batch.times)?;
    let a = &params.arch;
    if batch.obs.nrows() != a.obs_dim() || batch.targets.nrows() != a.target_dim() {
        return Err(Error::dim("batch does not match network dimensions"));
    }
    let na = a.n_actions();
    if batch.actions.iter().any(|&x| x >= na) {
        return Err(Error::dim("unknown action id"));
    }
    let u = params.u_table.as_ref().map(|t| gather_rows(t, &batch.trajs));
    let w = params.w_table.as_ref().map(|t| gather_rows(t, &batch.times));
    let (tau, q, z, h) = encode_cols(params, &batch.obs, u.as_ref(), w.as_ref());
    let (p_in, p1, p2, out) = transition_cols(params, &batch.actions, &h);
    let (a1, a2, probs) = actor_cols(params, &h);
    Ok(Cache { tau, u, w, q, z, h, p_in, p1, p2, out, a1, a2, probs })
}

fn transition_cols(
    params: &NtnParams,
    actions: &[usize],
    h: &DMatrix<f64>,
) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let na = params.arch.n_actions();
    let b = h.ncols();
    let mut p_in = DMatrix::zeros(na + h.nrows(), b);
    for (col, &act) in actions.iter().enumerate() {
        p_in[(act, col)] = 1.0;
    }
    p_in.view_mut((na, 0), (h.nrows(), b)).copy_from(h);
    let mut p1 = affine(&params.p_w1, &params.p_b1, &p_in);
    tanh_in_place(&mut p1);
    let mut p2 = affine(&params.p_w2, &params.p_b2, &p1);
    tanh_in_place(&mut p2);
    let out = affine(&params.p_w3, &params.p_b3, &p2);
    (p_in, p1, p2, out)
}

fn actor_cols(params: &NtnParams, h: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let mut a1 = affine(&params.a_w1, &params.a_b1, h);
    tanh_in_place(&mut a1);
    let mut a2 = affine(&params.a_w2, &params.a_b2, &a1);
    tanh_in_place(&mut a2);
    let mut probs = affine(&params.a_w3, &params.a_b3, &a2);
    for mut col in probs.column_iter_mut() {
        let m = col.max();
        col.apply(|x| *x = (*x - m).exp());
        let s = col.sum();
        col /= s;
    }
    (a1, a2, probs)
}

fn sigma_of(params: &NtnParams, raw: f64) -> f64 {
    (softplus(raw) + params.arch.sigma_min).min(params.arch.sigma_max)
}

/// Mean and standard deviation columns from the transition head output.
pub(crate) fn gaussian_from_out(params: &NtnParams, out: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let dt = params.arch.target_dim();
    let mu = out.rows(0, dt).into_owned();
    let sigma = out.rows(dt, dt).map(|r| sigma_of(params, r));
    (mu, sigma)
}

/// Transition-head mean and std for a batch of (obs, action, traj, time).
pub(crate) fn predict_batch(
    params: &NtnParams,
    obs: &DMatrix<f64>,
    actions: &[usize],
    trajs: &[usize],
    times: &[usize],
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    check_indices(params, trajs, times)?;
    let u = params.u_table.as_ref().map(|t| gather_rows(t, trajs));
    let w = params.w_table.as_ref().map(|t| gather_rows(t, times));
    let (_, _, _, h) = encode_cols(params, obs, u.as_ref(), w.as_ref());
    let (_, _, _, out) = transition_cols(params, actions, &h);
    Ok(gaussian_from_out(params, &out))
}

fn losses(params: &NtnParams, batch: &Batch, cache: &Cache, cfg: &LossConfig) -> LossBreakdown {
    let (mu, sigma) = gaussian_from_out(params, &cache.out);
    let mut l_t = 0.0;
    for (k, s) in sigma.iter().enumerate() {
        let r = mu[k] - batch.targets[k];
        l_t += 0.5 * (r * r / (s * s) + 2.0 * s.ln());
    }
    let l_a = if cfg.transition_only {
        0.0
    } else {
        batch
            .actions
            .iter()
            .enumerate()
            .map(|(col, &a)| -cache.probs[(a, col)].max(f64::MIN_POSITIVE).ln())
            .sum()
    };
    let (wt, wa) = cfg.weights();
    LossBreakdown {
        l_transition: l_t,
        l_actor: l_a,
        alpha: if cfg.transition_only { 0.0 } else { cfg.alpha },
        total: wt * l_t + wa * l_a,
    }
}

/// Joint loss summed over the batch.
pub fn loss(batch: &Batch, params: &NtnParams, cfg: &LossConfig) -> Result<LossBreakdown> {
    cfg.validate()?;
    let cache = forward(params, batch)?;
    let l = losses(params, batch, &cache, cfg);
    if !l.total.is_finite() {
        return Err(Error::NonFinite(format!("loss {l:?}")));
    }
    Ok(l)
}

/// Gradient of [`loss`]'s total with respect to every parameter block.
pub fn grad(batch: &Batch, params: &NtnParams, cfg: &LossConfig) -> Result<NtnParams> {
    loss_and_grad(batch, params, cfg).map(|(_, g)| g)
}

/// Backward through a tanh layer `y = tanh(w x + b)`; returns dL/dx.
fn tanh_layer_back(
    dy: &DMatrix<f64>,
    y: &DMatrix<f64>,
    x: &DMatrix<f64>,
    w: &DMatrix<f64>,
    gw: &mut DMatrix<f64>,
    gb: &mut DMatrix<f64>,
) -> DMatrix<f64> {
    let dpre = dy.component_mul(&y.map(|v| 1.0 - v * v));
    *gw += &dpre * x.transpose();
    *gb += row_sums(&dpre);
    w.transpose() * dpre
}

pub fn loss_and_grad(
    batch: &Batch,
    params: &NtnParams,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, NtnParams)> {
    cfg.validate()?;
    let c = forward(params, batch)?;
    let l = losses(params, batch, &c, cfg);
    if !l.total.is_finite() {
        return Err(Error::NonFinite(format!("loss {l:?}")));
    }
    let a = &params.arch;
    let (wt, wa) = cfg.weights();
    let dt = a.target_dim();
    let na = a.n_actions();
    let b = batch.len();
    let mut g = params.zeros_like();

    // transition head output
    let mut dout = DMatrix::zeros(2 * dt, b);
    for col in 0..b {
        for k in 0..dt {
            let raw = c.out[(dt + k, col)];
            let s_unclamped = softplus(raw) + a.sigma_min;
            let s = s_unclamped.min(a.sigma_max);
            let r = c.out[(k, col)] - batch.targets[(k, col)];
            dout[(k, col)] = wt * r / (s * s);
            let ds = wt * (1.0 / s - r * r / (s * s * s));
            dout[(dt + k, col)] = if s_unclamped < a.sigma_max { ds * logistic(raw) } else { 0.0 };
        }
    }
    g.p_w3 += &dout * c.p2.transpose();
    g.p_b3 += row_sums(&dout);
    let dp2 = params.p_w3.transpose() * &dout;
    let dp1 = tanh_layer_back(&dp2, &c.p2, &c.p1, &params.p_w2, &mut g.p_w2, &mut g.p_b2);
    let dp_in = tanh_layer_back(&dp1, &c.p1, &c.p_in, &params.p_w1, &mut g.p_w1, &mut g.p_b1);
    let mut dh = dp_in.rows(na, a.hidden).into_owned();

    // actor head
    if wa != 0.0 {
        let mut dlog = c.probs.clone();
        for (col, &act) in batch.actions.iter().enumerate() {
            dlog[(act, col)] -= 1.0;
        }
        dlog *= wa;
        g.a_w3 += &dlog * c.a2.transpose();
        g.a_b3 += row_sums(&dlog);
        let da2 = params.a_w3.transpose() * &dlog;
        let da1 = tanh_layer_back(&da2, &c.a2, &c.a1, &params.a_w2, &mut g.a_w2, &mut g.a_b2);
        dh += tanh_layer_back(&da1, &c.a1, &c.h, &params.a_w1, &mut g.a_w1, &mut g.a_b1);
    }

    // encoder
    g.f_w += &dh * c.z.transpose();
    g.f_b += row_sums(&dh);
    let dz = params.f_w.transpose() * &dh;
    let dpre = dz.component_mul(&c.z.map(|v| 1.0 - v * v));
    g.enc_w += &dpre * c.tau.transpose();
    g.enc_b += row_sums(&dpre);
    let dtau = params.enc_w.transpose() * &dpre;
    let d = a.embed_dim;
    let d_o = a.obs_dim();
    let mut row = d_o;
    let mut du = c.u.as_ref().map(|_| {
        let m = dtau.rows(row, d).into_owned();
        row += d;
        m
    });
    let mut dw = c.w.as_ref().map(|_| dtau.rows(row, d).into_owned());
    if let (Some(bil), Some(q)) = (&params.bilinear, &c.q) {
        *g.bilinear.as_mut().expect("bilinear grad block") += &dpre * q.transpose();
        let dq = bil.transpose() * &dpre;
        let (u, w) = (c.u.as_ref().unwrap(), c.w.as_ref().unwrap());
        let (du, dw) = (du.as_mut().unwrap(), dw.as_mut().unwrap());
        for col in 0..b {
            for i in 0..d {
                for j in 0..d {
                    let gq = dq[(i * d + j, col)];
                    du[(i, col)] += gq * w[(j, col)];
                    dw[(j, col)] += gq * u[(i, col)];
                }
            }
        }
    }
    if let (Some(du), Some(gu)) = (du, g.u_table.as_mut()) {
        for (col, &i) in batch.trajs.iter().enumerate() {
            for k in 0..d {
                gu[(i, k)] += du[(k, col)];
            }
        }
    }
    if let (Some(dw), Some(gw)) = (dw, g.w_table.as_mut()) {
        for (col, &t) in batch.times.iter().enumerate() {
            for k in 0..d {
                gw[(t, k)] += dw[(k, col)];
            }
        }
    }
    Ok((l, g))
}

fn col(v: &[f64]) -> DMatrix<f64> {
    DMatrix::from_column_slice(v.len(), 1, v)
}

/// Encoder output for one sample. `u` and `w` must be given exactly when
/// the encoder uses them.
pub fn encode(o: &[f64], u: Option<&[f64]>, w: Option<&[f64]>, params: &NtnParams) -> Result<Vec<f64>> {
    params.check_dims()?;
    let a = &params.arch;
    let d = a.embed_dim;
    if o.len() != a.obs_dim()
        || u.is_some() != a.encoder.uses_u()
        || w.is_some() != a.encoder.uses_w()
        || u.is_some_and(|u| u.len() != d)
        || w.is_some_and(|w| w.len() != d)
    {
        return Err(Error::dim("encoder inputs do not match the architecture"));
    }
    let (u, w) = (u.map(col), w.map(col));
    let (_, _, _, h) = encode_cols(params, &col(o), u.as_ref(), w.as_ref());
    Ok(h.as_slice().to_vec())
}

/// `f(tanh(u' W[1..k] w + M [o; u; w] + b))` for a two-way encoder.
pub fn ntn_forward(o: &[f64], u: &[f64], w: &[f64], params: &NtnParams) -> Result<Vec<f64>> {
    encode(o, Some(u), Some(w), params)
}

pub fn transition_head(action: usize, hidden: &[f64], params: &NtnParams) -> Result<TransitionPrediction> {
    let a = &params.arch;
    if action >= a.n_actions() {
        return Err(Error::dim(format!("unknown action id {action}")));
    }
    if hidden.len() != a.hidden {
        return Err(Error::dim("hidden width mismatch"));
    }
    let (_, _, _, out) = transition_cols(params, &[action], &col(hidden));
    let (mu, sigma) = gaussian_from_out(params, &out);
    Ok(TransitionPrediction { mu: mu.as_slice().to_vec(), sigma: sigma.as_slice().to_vec() })
}

pub fn actor_head(hidden: &[f64], params: &NtnParams) -> Result<Vec<f64>> {
    if hidden.len() != params.arch.hidden {
        return Err(Error::dim("hidden width mismatch"));
    }
    let (_, _, probs) = actor_cols(params, &col(hidden));
    Ok(probs.as_slice().to_vec())
}
