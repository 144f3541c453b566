use super::{tumor, ActionSpace, EnvConfig, EnvKind};
use crate::{Error, Result};

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Latents of a single `(i, t)` cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellLatents {
    pub u: f64,
    pub w: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PolicySpec {
    /// The env's confounded data-collection policy.
    Behavior,
    /// `P(A = 1) = p` on a binary action space.
    TargetRandom(f64),
    /// Dynamic-process target A, `P(A = 1) = 0.3`.
    TargetA,
    /// Dynamic-process target B, `P(A = 1) = 0.5`.
    TargetB,
    /// Tumor target A: chemo and radio each Bernoulli(0.05).
    TumorTargetA,
    /// Tumor target B: chemo and radio each Bernoulli(p(V)) with `p` stepping
    /// down at volume thresholds 88 / 44 / 5.
    TumorTargetB,
}

impl PolicySpec {
    pub fn name(&self) -> String {
        match self {
            PolicySpec::Behavior => "behavior".into(),
            PolicySpec::TargetRandom(p) => format!("random({p})"),
            PolicySpec::TargetA | PolicySpec::TumorTargetA => "A".into(),
            PolicySpec::TargetB | PolicySpec::TumorTargetB => "B".into(),
        }
    }

    /// Resolves a short target label (`A`, `B`, `random(p)`) for an env.
    pub fn parse_target(label: &str, kind: EnvKind) -> Result<Self> {
        let spec = match (label, kind) {
            ("A", EnvKind::TumorGrowth) => PolicySpec::TumorTargetA,
            ("B", EnvKind::TumorGrowth) => PolicySpec::TumorTargetB,
            ("A", _) => PolicySpec::TargetA,
            ("B", _) => PolicySpec::TargetB,
            (s, _) if s.starts_with("random(") && s.ends_with(')') => {
                let p: f64 = s[7..s.len() - 1]
                    .parse()
                    .map_err(|_| Error::config(format!("bad target policy `{s}`")))?;
                PolicySpec::TargetRandom(p)
            }
            (s, _) => return Err(Error::config(format!("unknown target policy `{s}`"))),
        };
        spec.check_env(kind)?;
        Ok(spec)
    }

    pub fn is_behavior(&self) -> bool {
        matches!(self, PolicySpec::Behavior)
    }

    pub(crate) fn check_env(&self, kind: EnvKind) -> Result<()> {
        let space = kind.action_space();
        match self {
            PolicySpec::TargetRandom(p) if !(0.0..=1.0).contains(p) => {
                Err(Error::Policy(format!("random target probability {p} outside [0, 1]")))
            }
            PolicySpec::TargetRandom(_) | PolicySpec::TargetA | PolicySpec::TargetB
                if space != ActionSpace::Binary =>
            {
                Err(Error::Policy(format!("{self:?} needs a binary action space")))
            }
            PolicySpec::TumorTargetA | PolicySpec::TumorTargetB if kind != EnvKind::TumorGrowth => {
                Err(Error::Policy(format!("{self:?} is defined for tumor growth only")))
            }
            _ => Ok(()),
        }
    }
}

fn bernoulli_pair(pc: f64, pr: f64) -> Vec<f64> {
    vec![(1.0 - pc) * (1.0 - pr), (1.0 - pc) * pr, pc * (1.0 - pr), pc * pr]
}

fn tumor_target_b_prob(volume: f64) -> f64 {
    if volume > 88.0 {
        0.2
    } else if volume > 44.0 {
        0.1
    } else if volume > 5.0 {
        0.05
    } else {
        0.01
    }
}

/// Action distribution of `policy` at an observation.
///
/// `t` is the 0-based time index. Latents must be supplied exactly when the
/// policy is [`PolicySpec::Behavior`].
pub fn policy_prob(
    env: &EnvConfig,
    policy: &PolicySpec,
    obs: &[f64],
    t: usize,
    latents: Option<&CellLatents>,
) -> Result<Vec<f64>> {
    policy.check_env(env.kind)?;
    if obs.len() != env.kind.obs_dim() {
        return Err(Error::dim("observation length does not match env"));
    }
    match (policy, latents) {
        (PolicySpec::Behavior, None) => {
            Err(Error::Policy("behavior policy requires latents".into()))
        }
        (PolicySpec::Behavior, Some(l)) => Ok(behavior_prob(env, obs, t, l)),
        (_, Some(_)) => Err(Error::Policy("target policies do not read latents".into())),
        (target, None) => Ok(target_prob(target, obs)),
    }
}

fn behavior_prob(env: &EnvConfig, obs: &[f64], t: usize, l: &CellLatents) -> Vec<f64> {
    let g = env.gamma;
    match env.kind {
        EnvKind::Linear => {
            let p = sigmoid(obs[0] + l.u + l.w);
            vec![1.0 - p, p]
        }
        EnvKind::DynamicProcess => {
            let lin: f64 = 0.25 * obs.iter().sum::<f64>() - 4.0;
            let p = sigmoid(lin + g * 3.0 * (l.u * l.w + l.u + l.w));
            vec![1.0 - p, p]
        }
        EnvKind::TumorGrowth => {
            let tp = &env.tumor;
            let dia = tumor::diameter(obs[0]);
            let conf = g * (3.0 * sigmoid(l.u - 2.0) - 0.75 * tumor::time_confounder(t));
            let theta = tp.d_max / 2.0;
            let pc = sigmoid(tp.gamma_c / tp.d_max * (dia - theta) + conf);
            let pr = sigmoid(tp.gamma_r / tp.d_max * (dia - theta) + conf);
            bernoulli_pair(pc, pr)
        }
    }
}

fn target_prob(policy: &PolicySpec, obs: &[f64]) -> Vec<f64> {
    match policy {
        PolicySpec::TargetRandom(p) => vec![1.0 - p, *p],
        PolicySpec::TargetA => vec![0.7, 0.3],
        PolicySpec::TargetB => vec![0.5, 0.5],
        PolicySpec::TumorTargetA => bernoulli_pair(0.05, 0.05),
        PolicySpec::TumorTargetB => {
            let p = tumor_target_b_prob(obs[0]);
            bernoulli_pair(p, p)
        }
        PolicySpec::Behavior => unreachable!("behavior handled by caller"),
    }
}

/// A latent-free policy bound to an env's action space.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetPolicy {
    spec: PolicySpec,
    kind: EnvKind,
}

impl TargetPolicy {
    pub fn new(spec: PolicySpec, kind: EnvKind) -> Result<Self> {
        if spec.is_behavior() {
            return Err(Error::Policy(
                "target policy requires latents: the behavior policy cannot be evaluated".into(),
            ));
        }
        spec.check_env(kind)?;
        Ok(Self { spec, kind })
    }

    pub fn spec(&self) -> &PolicySpec {
        &self.spec
    }

    pub fn kind(&self) -> EnvKind {
        self.kind
    }

    pub fn probs(&self, obs: &[f64]) -> Vec<f64> {
        target_prob(&self.spec, obs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(kind: EnvKind) -> EnvConfig {
        EnvConfig::new(kind, 1, 0)
    }

    #[test]
    fn linear_behavior_at_zero_is_half() {
        let p = policy_prob(
            &cfg(EnvKind::Linear),
            &PolicySpec::Behavior,
            &[0.0],
            0,
            Some(&CellLatents { u: 0.0, w: 0.0 }),
        )
        .unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
    }

    #[test]
    fn dp_behavior_at_zero_is_sigmoid_minus_four() {
        // sigmoid(-4) = 1 / (1 + e^4)
        let expected = 1.0 / (1.0 + 4.0f64.exp());
        assert!((expected - 0.017986209962091559).abs() < 1e-15);
        for g in [0.0, 0.3, 1.0] {
            let p = policy_prob(
                &cfg(EnvKind::DynamicProcess).with_gamma(g),
                &PolicySpec::Behavior,
                &[0.0; 4],
                3,
                Some(&CellLatents { u: 0.0, w: 0.0 }),
            )
            .unwrap();
            assert!((p[1] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn target_constants() {
        let lin = cfg(EnvKind::Linear);
        let dp = cfg(EnvKind::DynamicProcess);
        let tum = cfg(EnvKind::TumorGrowth);
        assert_eq!(
            policy_prob(&lin, &PolicySpec::TargetRandom(0.5), &[1.0], 0, None).unwrap(),
            vec![0.5, 0.5]
        );
        assert_eq!(policy_prob(&dp, &PolicySpec::TargetA, &[0.0; 4], 0, None).unwrap()[1], 0.3);
        assert_eq!(policy_prob(&dp, &PolicySpec::TargetB, &[0.0; 4], 0, None).unwrap()[1], 0.5);
        let p = policy_prob(&tum, &PolicySpec::TumorTargetA, &[10.0, 0.0], 0, None).unwrap();
        // marginals of chemo (ids 2, 3) and radio (ids 1, 3)
        assert!((p[2] + p[3] - 0.05).abs() < 1e-15);
        assert!((p[1] + p[3] - 0.05).abs() < 1e-15);
    }

    #[test]
    fn tumor_target_b_thresholds() {
        let tum = cfg(EnvKind::TumorGrowth);
        for (v, expected) in [(100.0, 0.2), (88.0, 0.1), (50.0, 0.1), (44.0, 0.05), (6.0, 0.05), (5.0, 0.01), (1.0, 0.01)] {
            let p = policy_prob(&tum, &PolicySpec::TumorTargetB, &[v, 0.0], 0, None).unwrap();
            assert!((p[2] + p[3] - expected).abs() < 1e-15, "v={v}");
        }
    }

    #[test]
    fn latents_iff_behavior() {
        let dp = cfg(EnvKind::DynamicProcess);
        let l = CellLatents { u: 0.0, w: 0.0 };
        assert!(policy_prob(&dp, &PolicySpec::Behavior, &[0.0; 4], 0, None).is_err());
        assert!(policy_prob(&dp, &PolicySpec::TargetA, &[0.0; 4], 0, Some(&l)).is_err());
        assert!(TargetPolicy::new(PolicySpec::Behavior, EnvKind::Linear).is_err());
    }

    #[test]
    fn incompatible_targets_rejected() {
        assert!(PolicySpec::TumorTargetA.check_env(EnvKind::Linear).is_err());
        assert!(PolicySpec::TargetA.check_env(EnvKind::TumorGrowth).is_err());
        assert!(PolicySpec::TargetRandom(1.2).check_env(EnvKind::Linear).is_err());
    }

    fn all_policies(kind: EnvKind) -> Vec<PolicySpec> {
        match kind {
            EnvKind::TumorGrowth => {
                vec![PolicySpec::Behavior, PolicySpec::TumorTargetA, PolicySpec::TumorTargetB]
            }
            _ => vec![
                PolicySpec::Behavior,
                PolicySpec::TargetRandom(0.37),
                PolicySpec::TargetA,
                PolicySpec::TargetB,
            ],
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn rows_sum_to_one(
            o in proptest::collection::vec(-50.0f64..200.0, 4),
            u in -5.0f64..5.0,
            w in -5.0f64..5.0,
            t in 0usize..80,
            g in 0.0f64..=1.0,
            k in 0usize..3,
        ) {
            let kind = [EnvKind::Linear, EnvKind::DynamicProcess, EnvKind::TumorGrowth][k];
            let env = cfg(kind).with_gamma(g);
            let mut obs = o[..kind.obs_dim()].to_vec();
            if kind == EnvKind::TumorGrowth {
                obs[0] = obs[0].abs() + 1e-3;
                let u = (u.abs() as usize % 3 + 1) as f64;
                for p in all_policies(kind) {
                    let lat = CellLatents { u, w: tumor::time_confounder(t) };
                    let l = p.is_behavior().then_some(&lat);
                    let probs = policy_prob(&env, &p, &obs, t, l).unwrap();
                    prop_assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                    prop_assert!(probs.iter().all(|&x| (0.0..=1.0).contains(&x)));
                }
            } else {
                for p in all_policies(kind) {
                    let lat = CellLatents { u, w };
                    let l = p.is_behavior().then_some(&lat);
                    let probs = policy_prob(&env, &p, &obs, t, l).unwrap();
                    prop_assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                    prop_assert!(probs.iter().all(|&x| (0.0..=1.0).contains(&x)));
                }
            }
        }
    }
}
