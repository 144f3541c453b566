//! Four-dimensional dynamic process with confounding strength `gamma`:
//!
//! ```text
//! O' = 0.8 O + gamma * 0.1 f_o(u, w) + A 1_4 - 0.5 1_4 + e_o
//! R  = 0.25 1_4' O + gamma * 3 u w + 2.5 A + e_r
//! f_o(u, w) = [u - w, u + w, -u - w, -u + w]
//! ```

use super::{CellLatents, EnvConfig, StepOutcome};
use crate::rng::{self, StreamRng};

pub(crate) const MU_O: f64 = 0.8;
pub(crate) const BETA_O: f64 = 0.1;
pub(crate) const LAMBDA_O: f64 = 1.0;
pub(crate) const B_O: f64 = -0.5;
pub(crate) const MU_R: f64 = 0.25;
pub(crate) const BETA_R: f64 = 3.0;
pub(crate) const LAMBDA_R: f64 = 2.5;

pub(crate) fn f_o(u: f64, w: f64) -> [f64; 4] {
    [u - w, u + w, -u - w, -u + w]
}

pub(crate) fn step(
    config: &EnvConfig,
    obs: &[f64],
    action: usize,
    l: CellLatents,
    noise: &mut StreamRng,
) -> StepOutcome {
    let g = config.gamma;
    let a = action as f64;
    let f = f_o(l.u, l.w);
    let next_obs = (0..4)
        .map(|k| {
            MU_O * obs[k] + g * BETA_O * f[k] + LAMBDA_O * a + B_O
                + rng::normal(noise) * config.noise_scale
        })
        .collect();
    let reward = MU_R * obs.iter().sum::<f64>()
        + g * BETA_R * l.u * l.w
        + LAMBDA_R * a
        + rng::normal(noise) * config.noise_scale;
    StepOutcome { reward, next_obs, clamped: false }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::EnvKind;
    use crate::rng::{Purpose, Streams};

    #[test]
    fn zero_latent_case() {
        let mut cfg = EnvConfig::new(EnvKind::DynamicProcess, 1, 0);
        cfg.noise_scale = 0.0;
        let mut r = Streams::new(0).stream(Purpose::TransitionNoise, 0);
        let out = step(&cfg, &[0.0; 4], 0, CellLatents { u: 0.0, w: 0.0 }, &mut r);
        assert_eq!(out.next_obs, vec![-0.5; 4]);
        assert_eq!(out.reward, 0.0);
    }

    #[test]
    fn latent_terms_scale_with_gamma() {
        let mut cfg = EnvConfig::new(EnvKind::DynamicProcess, 1, 0).with_gamma(0.5);
        cfg.noise_scale = 0.0;
        let mut r = Streams::new(0).stream(Purpose::TransitionNoise, 0);
        let out = step(&cfg, &[1.0, 2.0, 3.0, 4.0], 1, CellLatents { u: 2.0, w: -1.0 }, &mut r);
        // f_o(2, -1) = [3, 1, -1, -3]
        let expect = [0.8 + 0.15 + 0.5, 1.6 + 0.05 + 0.5, 2.4 - 0.05 + 0.5, 3.2 - 0.15 + 0.5];
        for k in 0..4 {
            assert!((out.next_obs[k] - expect[k]).abs() < 1e-12);
        }
        assert!((out.reward - (2.5 + 0.5 * 3.0 * -2.0 + 2.5)).abs() < 1e-12);
    }
}
