//! Ablation variants of the two-way deconfounder and the one-way baselines.
//!
//! | variant  | encoder                | loss                |
//! |----------|------------------------|---------------------|
//! | TWD      | tensor layer on (u, w) | joint               |
//! | TWD_TO   | tensor layer on (u, w) | transition only     |
//! | TWD_MLP  | affine on [o; u; w]    | joint               |
//! | OWD_NI   | affine on [o; w]       | joint               |
//! | OWD_NT   | affine on [o; u]       | joint               |

use std::fmt::Write as _;

use crate::env::{generate, io::fmt_f64, EnvConfig, PolicySpec};
use crate::ntn::EncoderKind;
use crate::ope::{crossfit_estimate, estimate_with_params, metrics, OpeConfig};
use crate::train::{train_model, HyperParams};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VariantKind {
    Twd,
    TwdTo,
    TwdMlp,
    OwdNi,
    OwdNt,
}

impl VariantKind {
    pub const ALL: [VariantKind; 5] =
        [VariantKind::Twd, VariantKind::TwdTo, VariantKind::TwdMlp, VariantKind::OwdNi, VariantKind::OwdNt];

    pub fn name(self) -> &'static str {
        match self {
            VariantKind::Twd => "TWD",
            VariantKind::TwdTo => "TWD_TO",
            VariantKind::TwdMlp => "TWD_MLP",
            VariantKind::OwdNi => "OWD_NI",
            VariantKind::OwdNt => "OWD_NT",
        }
    }

    pub fn encoder(self) -> EncoderKind {
        match self {
            VariantKind::Twd | VariantKind::TwdTo => EncoderKind::Ntn,
            VariantKind::TwdMlp => EncoderKind::Mlp,
            VariantKind::OwdNi => EncoderKind::MlpNoU,
            VariantKind::OwdNt => EncoderKind::MlpNoW,
        }
    }
}

impl std::str::FromStr for VariantKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        VariantKind::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::config(format!("unknown method `{s}`")))
    }
}

/// Hyperparameters of `kind` derived from the TWD hyperparameters `base`.
pub fn make_variant(kind: VariantKind, base: &HyperParams) -> HyperParams {
    HyperParams {
        encoder: kind.encoder(),
        transition_only: kind == VariantKind::TwdTo,
        ..base.clone()
    }
}

/// Trains `kind` on `data` over `grid` (TWD hyperparameters) and estimates
/// the value of every target. `seed` overrides the grid seeds.
pub fn fit_and_evaluate(
    kind: VariantKind,
    data: &crate::env::Dataset,
    grid: &[HyperParams],
    targets: &[PolicySpec],
    ope: &OpeConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    let grid: Vec<HyperParams> =
        grid.iter().map(|h| HyperParams { seed, ..make_variant(kind, h) }).collect();
    if ope.crossfit {
        let mut fold_params = Vec::new();
        let mut out = Vec::with_capacity(targets.len());
        for target in targets {
            let cfg = OpeConfig { target: target.clone(), ..ope.clone() };
            let est = crossfit_estimate(data, &cfg, |fold, j| {
                if let Some(p) = fold_params.get(j) {
                    return Ok(Clone::clone(p));
                }
                let grid: Vec<HyperParams> =
                    grid.iter().map(|h| HyperParams { seed: seed ^ (j as u64 + 1), ..h.clone() }).collect();
                let (p, _) = train_model(fold, &grid)?;
                fold_params.push(p.clone());
                Ok(p)
            })?;
            out.push(est.value);
        }
        return Ok(out);
    }
    let (params, _) = train_model(data, &grid)?;
    targets
        .iter()
        .map(|target| {
            let cfg = OpeConfig { target: target.clone(), ..ope.clone() };
            Ok(estimate_with_params(&params, data, &cfg)?.value)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub env: String,
    pub target: String,
    pub variant: VariantKind,
    pub lmse: f64,
    pub bias: f64,
}

pub const ABLATION_HEADER: &str = "env,target,variant,lmse,bias";

pub fn write_ablation(rows: &[AblationRow]) -> String {
    let mut s = format!("{ABLATION_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{}", r.env, r.target, r.variant.name(), fmt_f64(r.lmse), fmt_f64(r.bias));
    }
    s
}

/// Settings shared by all ablation repetitions.
#[derive(Debug, Clone)]
pub struct AblationSetup {
    pub env: EnvConfig,
    pub targets: Vec<PolicySpec>,
    /// Ground-truth value of each target.
    pub eta_true: Vec<f64>,
    pub grid: Vec<HyperParams>,
    pub ope: OpeConfig,
    pub repetitions: usize,
    pub master_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    /// `estimates[v][k]` holds the per-repetition estimates of target `k`
    /// for the `v`-th variant.
    pub estimates: Vec<Vec<Vec<f64>>>,
    pub failures: Vec<String>,
}

/// Trains every variant on the same `R` datasets and reports LMSE and bias.
/// A failing variant is recorded and the others continue.
pub fn run_ablation(setup: &AblationSetup, variants: &[VariantKind]) -> Result<AblationReport> {
    if variants.is_empty() {
        return Err(Error::config("no ablation variants"));
    }
    if setup.targets.len() != setup.eta_true.len() {
        return Err(Error::dim("one ground-truth value per target"));
    }
    let nt = setup.targets.len();
    let mut estimates = vec![vec![Vec::new(); nt]; variants.len()];
    let mut failed = vec![false; variants.len()];
    let mut failures = Vec::new();
    let env = &setup.env;
    for rep in 0..setup.repetitions {
        let cfg = EnvConfig {
            seed: crate::experiment::data_seed(setup.master_seed, env.n_trajectories, env.gamma, rep),
            ..env.clone()
        };
        let (data, _) = generate(&cfg, &PolicySpec::Behavior)?;
        for (v, &kind) in variants.iter().enumerate() {
            if failed[v] {
                continue;
            }
            let seed = crate::experiment::train_seed(setup.master_seed, env.n_trajectories, env.gamma, kind.name(), rep);
            let ope = OpeConfig {
                seed: crate::experiment::ope_seed(setup.master_seed, env.n_trajectories, env.gamma, kind.name(), rep),
                ..setup.ope.clone()
            };
            match fit_and_evaluate(kind, &data, &setup.grid, &setup.targets, &ope, seed) {
                Ok(vals) => {
                    for (k, x) in vals.into_iter().enumerate() {
                        estimates[v][k].push(x);
                    }
                }
                Err(e) => {
                    failed[v] = true;
                    failures.push(format!("{} rep {rep}: {e}", kind.name()));
                }
            }
        }
    }
    let mut rows = Vec::new();
    for (k, target) in setup.targets.iter().enumerate() {
        for (v, &kind) in variants.iter().enumerate() {
            if failed[v] {
                continue;
            }
            let (lmse, bias) = metrics(&estimates[v][k], setup.eta_true[k])?;
            rows.push(AblationRow { env: env.kind.name().into(), target: target.name(), variant: kind, lmse, bias });
        }
    }
    Ok(AblationReport { rows, estimates, failures })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::EnvKind;
    use crate::ntn::{grad, Batch, NtnParams, Normalization};
    use crate::rng::{Purpose, Streams};

    #[test]
    fn variant_shapes() {
        let base = HyperParams::default();
        let to = make_variant(VariantKind::TwdTo, &HyperParams { loss_alpha: 0.7, ..base.clone() });
        assert!(to.transition_only);
        assert_eq!(to.loss_config(), crate::ntn::LossConfig::transition_only());
        assert_eq!(make_variant(VariantKind::OwdNi, &base).encoder, EncoderKind::MlpNoU);
        assert_eq!(make_variant(VariantKind::OwdNt, &base).encoder, EncoderKind::MlpNoW);
        assert_eq!(make_variant(VariantKind::TwdMlp, &base).encoder, EncoderKind::Mlp);
        for v in VariantKind::ALL {
            assert_eq!(v.name().parse::<VariantKind>().unwrap(), v);
        }
    }

    #[test]
    fn owd_ni_gradient_has_no_u_block() {
        let data = generate(&EnvConfig::new(EnvKind::DynamicProcess, 3, 1).with_horizon(4), &PolicySpec::Behavior)
            .unwrap()
            .0;
        let hp = make_variant(VariantKind::OwdNi, &HyperParams { embed_dim: 2, mlp_width: 5, hidden: 4, ..Default::default() });
        let p = NtnParams::init(hp.arch(&data), Normalization::from_dataset(&data), &mut Streams::new(1).stream(Purpose::ParamInit, 0))
            .unwrap();
        let cells: Vec<usize> = (0..12).collect();
        let g = grad(&Batch::from_cells(&data, &cells, &p), &p, &hp.loss_config()).unwrap();
        assert!(g.u_table.is_none());
        assert!(g.blocks().iter().all(|(n, _)| *n != "u_table"));
    }

    #[test]
    fn empty_variant_list_rejected() {
        let setup = AblationSetup {
            env: EnvConfig::new(EnvKind::DynamicProcess, 4, 1),
            targets: vec![PolicySpec::TargetA],
            eta_true: vec![0.0],
            grid: vec![HyperParams::default()],
            ope: OpeConfig::new(PolicySpec::TargetA, 1),
            repetitions: 1,
            master_seed: 1,
        };
        assert!(run_ablation(&setup, &[]).is_err());
    }
}
