//! PK-PD tumor growth with group-level confounding.
//!
//! Observation is `(V, C)`: tumor volume and chemotherapy concentration
//! before the current action. One step with chemo `a_c` and radio `a_r`:
//!
//! ```text
//! C(t) = C(t-1) / 2 + 5 a_c
//! V(t) = (1 + rho log(K / V(t-1)) - beta_c C(t) - (alpha a_r + beta a_r^2) + e) V(t-1)
//! R    = 1.5 exp(-V(t)) + exp(-(a_r + a_c)^2) + gamma (4 sigmoid(S - 2) - sin(0.1 pi t)) + e_r
//! ```
//!
//! The PK-PD constants are configuration, not ground truth: the shipped
//! defaults are placeholders that keep volumes in a range where the target
//! policy thresholds are exercised.

use serde::{Deserialize, Serialize};

use super::policy::sigmoid;
use super::{CellLatents, EnvConfig, StepOutcome};
use crate::rng::{self, StreamRng};
use crate::{Error, Result};

/// Tumor volume noise standard deviation.
const VOLUME_NOISE_SD: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TumorParams {
    pub rho: f64,
    #[serde(rename = "K")]
    pub k: f64,
    /// Per-group chemo sensitivity, indexed by `S - 1`.
    pub beta_c: [f64; 3],
    pub alpha: [f64; 3],
    pub beta: [f64; 3],
    pub v0_low: f64,
    pub v0_high: f64,
    pub d_max: f64,
    pub v_min: f64,
    pub gamma_c: f64,
    pub gamma_r: f64,
}

impl Default for TumorParams {
    fn default() -> Self {
        Self {
            rho: 0.07,
            k: 1000.0,
            beta_c: [0.020, 0.028, 0.036],
            alpha: [0.030, 0.040, 0.050],
            beta: [0.003, 0.004, 0.005],
            v0_low: 1.0,
            v0_high: 50.0,
            d_max: 13.0,
            v_min: 1e-3,
            gamma_c: 10.0,
            gamma_r: 10.0,
        }
    }
}

impl TumorParams {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.rho, self.k, self.v0_low, self.v0_high, self.d_max, self.v_min, self.gamma_c,
            self.gamma_r,
        ];
        if all.iter().chain(&self.beta_c).chain(&self.alpha).chain(&self.beta).any(|x| !x.is_finite()) {
            return Err(Error::config("tumor parameters must be finite"));
        }
        if self.k <= 0.0 || self.v_min <= 0.0 || self.d_max <= 0.0 {
            return Err(Error::config("tumor K, v_min and d_max must be positive"));
        }
        if !(self.v0_low > 0.0 && self.v0_low <= self.v0_high) {
            return Err(Error::config("tumor initial volume interval must satisfy 0 < low <= high"));
        }
        Ok(())
    }

    pub(crate) fn draw_patient(&self, rng: &mut StreamRng) -> TumorPatient {
        let group = ((rng::uniform(rng) * 3.0) as u8).min(2) + 1;
        let g = (group - 1) as usize;
        TumorPatient {
            group,
            rho: self.rho,
            k: self.k,
            beta_c: self.beta_c[g],
            alpha: self.alpha[g],
            beta: self.beta[g],
        }
    }

    pub(crate) fn initial_state(&self, rng: &mut StreamRng) -> Vec<f64> {
        let v0 = self.v0_low + (self.v0_high - self.v0_low) * rng::uniform(rng);
        vec![v0, 0.0]
    }
}

/// Per-patient PK-PD parameters and group label `S in {1, 2, 3}`.
#[derive(Debug, Clone, PartialEq)]
pub struct TumorPatient {
    pub group: u8,
    pub rho: f64,
    pub k: f64,
    pub beta_c: f64,
    pub alpha: f64,
    pub beta: f64,
}

/// Tumor diameter from volume, `D = (6 V / pi)^(1/3)`.
pub fn diameter(volume: f64) -> f64 {
    (6.0 * volume.max(0.0) / std::f64::consts::PI).cbrt()
}

/// `sin(0.1 pi s)` where `s = t + 1` is the 1-based step of the 0-based index `t`.
pub(crate) fn time_confounder(t: usize) -> f64 {
    (0.1 * std::f64::consts::PI * (t + 1) as f64).sin()
}

pub(crate) fn confounder_reward(gamma: f64, group: f64, w: f64) -> f64 {
    gamma * (4.0 * sigmoid(group - 2.0) - w)
}

pub(crate) fn concentration(prev: f64, chemo: u8) -> f64 {
    prev / 2.0 + 5.0 * chemo as f64
}

pub(crate) fn step(
    config: &EnvConfig,
    obs: &[f64],
    action: usize,
    l: CellLatents,
    p: &TumorPatient,
    _t: usize,
    noise: &mut StreamRng,
) -> StepOutcome {
    let tp = &config.tumor;
    let chemo = (action / 2) as u8;
    let radio = (action % 2) as f64;
    let (v_prev, c_prev) = (obs[0], obs[1]);
    let c = concentration(c_prev, chemo);
    let e = rng::normal(noise) * VOLUME_NOISE_SD * config.noise_scale;
    let factor = 1.0 + p.rho * (p.k / v_prev).ln() - p.beta_c * c - (p.alpha * radio + p.beta * radio * radio) + e;
    let mut v = factor * v_prev;
    let mut clamped = false;
    if !(v >= tp.v_min) {
        v = tp.v_min;
        clamped = true;
    }
    let r_n = 1.5 * (-v).exp();
    let r_p = (-(radio + chemo as f64).powi(2)).exp();
    let r_tw = confounder_reward(config.gamma, l.u, l.w);
    let e_r = rng::normal(noise) * config.noise_scale;
    StepOutcome { reward: r_n + r_p + r_tw + e_r, next_obs: vec![v, c], clamped }
}
