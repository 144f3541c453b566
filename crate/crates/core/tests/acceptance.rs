//! End-to-end acceptance checks. Each test writes one `criterion N: PASS|FAIL`
//! line to stderr (bypassing the output capture) before asserting.

use std::io::Write as _;
use std::sync::OnceLock;

use nalgebra::DMatrix;
use twode::ablate::{fit_and_evaluate, make_variant, VariantKind};
use twode::env::{
    generate, true_policy_value, EnvConfig, EnvKind, PolicySpec, TrueDynamics,
};
use twode::experiment::{parse_config_str, run, RunOptions};
use twode::linfe::{
    linear_conditional_means, linear_time_effect, owuc_floor, prediction_mse, replicate, AssumptionKind,
    FitTarget, LinearFeModel, DEFAULT_MAX_CELLS,
};
use twode::ntn::{
    grad, loss, ntn_forward, parse_checkpoint, write_checkpoint, Arch, Batch, EncoderKind, LossConfig, NtnParams,
    Normalization,
};
use twode::ope::{estimate_value, metrics, OpeConfig};
use twode::rng::{derive_seed, normal, uniform, Purpose, StreamRng, Streams};
use twode::train::{fit_full, HyperParams};

fn verdict(id: u32, ok: bool, detail: &str) {
    let tag = if ok { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "criterion {id}: {tag} ({detail})");
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

// ---------------------------------------------------------------------------
// Linear fixed effects

const LIN_T: usize = 50;
const LIN_REPS: usize = 50;
const LIN_NS: [usize; 3] = [200, 400, 800];
const SIGMA2: f64 = 2.0;

struct LinearStats {
    /// `mse[kind][n_index]` averaged over replications.
    mse: [[f64; 3]; 3],
    /// Mean OWUC floor per N.
    floor: [f64; 3],
}

fn linear_stats() -> &'static LinearStats {
    static CELL: OnceLock<LinearStats> = OnceLock::new();
    CELL.get_or_init(|| {
        let mut mse = [[0.0; 3]; 3];
        let mut floor = [0.0; 3];
        for (ni, &n) in LIN_NS.iter().enumerate() {
            for rep in 0..LIN_REPS {
                let seed = derive_seed(1, &["linear", &n.to_string(), &rep.to_string()]);
                let cfg = EnvConfig::new(EnvKind::Linear, n, seed).with_horizon(LIN_T);
                let (data, latents) = generate(&cfg, &PolicySpec::Behavior).unwrap();
                let truth = linear_conditional_means(&data, &latents, FitTarget::Reward).unwrap();
                floor[ni] += owuc_floor(&linear_time_effect(&latents)) / LIN_REPS as f64;
                for (ki, &kind) in AssumptionKind::ALL.iter().enumerate() {
                    let model = LinearFeModel::fit(&data, kind, DEFAULT_MAX_CELLS).unwrap();
                    mse[ki][ni] += prediction_mse(model.reward_fit(), &truth).unwrap() / LIN_REPS as f64;
                }
            }
        }
        LinearStats { mse, floor }
    })
}

fn kind_index(kind: AssumptionKind) -> usize {
    AssumptionKind::ALL.iter().position(|&k| k == kind).unwrap()
}

#[test]
fn criterion_01_uuc_mse_stays_at_noise_variance() {
    let s = linear_stats();
    let m = s.mse[kind_index(AssumptionKind::Uuc)];
    let within = m.iter().all(|&x| ((x - SIGMA2) / SIGMA2).abs() < 0.15);
    let flat = ((m[2] - m[0]) / m[0]).abs() < 0.10;
    verdict(1, within && flat, &format!("UUC mean MSE {m:.4?} vs sigma^2 = {SIGMA2}"));
    assert!(within && flat);
}

#[test]
fn criterion_02_twuc_mse_decays() {
    let s = linear_stats();
    let m = s.mse[kind_index(AssumptionKind::Twuc)];
    let theory: Vec<f64> =
        LIN_NS.iter().map(|&n| SIGMA2 * (n + LIN_T + 2) as f64 / (n * LIN_T) as f64).collect();
    let within = m.iter().zip(&theory).all(|(x, t)| ((x - t) / t).abs() < 0.15);
    let decreasing = m.windows(2).all(|w| w[1] < w[0]);
    verdict(2, within && decreasing, &format!("TWUC mean MSE {m:.5?} vs {theory:.5?}"));
    assert!(within && decreasing);
}

#[test]
fn criterion_03_owuc_mse_hits_time_effect_floor() {
    let s = linear_stats();
    let m = s.mse[kind_index(AssumptionKind::Owuc)];
    let within = m.iter().zip(&s.floor).all(|(x, f)| ((x - f) / f).abs() < 0.15);
    let no_decay = m[2] >= 0.8 * m[0];
    verdict(3, within && no_decay, &format!("OWUC mean MSE {m:.3?} vs floor {:.3?}", s.floor));
    assert!(within && no_decay);
}

#[test]
fn criterion_04_twuc_wins_linear_ope() {
    let (n, reps) = (500, 50);
    let mut wins = 0;
    for rep in 0..reps {
        let seed = derive_seed(4, &["ope", &rep.to_string()]);
        let cfg = EnvConfig::new(EnvKind::Linear, n, seed).with_horizon(LIN_T);
        let (data, latents) = generate(&cfg, &PolicySpec::Behavior).unwrap();
        let mut ope = OpeConfig::new(PolicySpec::TargetRandom(0.5), seed ^ 1);
        ope.n_rollouts_per_traj = 10;
        let rows = replicate(&data, &latents, SIGMA2, &ope, seed).unwrap();
        let err = |k: AssumptionKind| rows.iter().find(|r| r.assumption == k).unwrap().ope_mse;
        let tw = err(AssumptionKind::Twuc);
        if tw < err(AssumptionKind::Uuc) && tw < err(AssumptionKind::Owuc) {
            wins += 1;
        }
    }
    let ok = wins * 100 >= 80 * reps;
    verdict(4, ok, &format!("TWUC best OPE error in {wins}/{reps} replications"));
    assert!(ok);
}

// ---------------------------------------------------------------------------
// Network

fn perturb(p: &mut NtnParams, rng: &mut StreamRng, scale: f64) {
    for (_, m) in p.blocks_mut() {
        for x in m.iter_mut() {
            *x += scale * normal(rng);
        }
    }
}

#[test]
fn criterion_05_gradient_matches_finite_differences() {
    const H: f64 = 1e-5;
    // Entries with tiny gradients are compared on an absolute scale.
    const DENOM_FLOOR: f64 = 1e-3;
    let envs = [EnvKind::DynamicProcess, EnvKind::TumorGrowth, EnvKind::Linear];
    let streams = Streams::new(5);
    let mut worst = 0.0_f64;
    let mut checked = 0usize;
    for draw in 0..20u64 {
        let variant = VariantKind::ALL[draw as usize % VariantKind::ALL.len()];
        let env = envs[draw as usize % envs.len()];
        let cfg = EnvConfig::new(env, 3, 50 + draw).with_horizon(4);
        let data = generate(&cfg, &PolicySpec::Behavior).unwrap().0;
        let mut rng = streams.stream(Purpose::ParamInit, draw);
        let base = HyperParams {
            embed_dim: 2,
            ntn_slices: 3,
            hidden: 4,
            mlp_width: 5,
            loss_alpha: 0.9 * uniform(&mut rng),
            ..Default::default()
        };
        let hp = make_variant(variant, &base);
        let mut p = NtnParams::init(hp.arch(&data), Normalization::from_dataset(&data), &mut rng).unwrap();
        perturb(&mut p, &mut rng, 0.3);
        let cells: Vec<usize> = (0..data.n * data.t).collect();
        let batch = Batch::from_cells(&data, &cells, &p);
        let lc = hp.loss_config();
        let g = grad(&batch, &p, &lc).unwrap();
        let analytic: Vec<(&str, DMatrix<f64>)> = g.blocks().into_iter().map(|(n, m)| (n, m.clone())).collect();
        for (bi, (name, ga)) in analytic.iter().enumerate() {
            for idx in 0..ga.len() {
                let eval = |delta: f64| {
                    let mut q = p.clone();
                    let mut blocks = q.blocks_mut();
                    assert_eq!(blocks[bi].0, *name);
                    blocks[bi].1[idx] += delta;
                    loss(&batch, &q, &lc).unwrap().total
                };
                let fd = (eval(H) - eval(-H)) / (2.0 * H);
                let a = ga[idx];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(DENOM_FLOOR);
                worst = worst.max(rel);
                checked += 1;
            }
        }
    }
    let ok = worst < 1e-4;
    verdict(5, ok, &format!("max relative error {worst:.2e} over {checked} coordinates"));
    assert!(ok);
}

/// Direct transcription of `f(tanh(u' W[s] w + M [o; u; w] + b))`.
fn naive_ntn(o: &[f64], u: &[f64], w: &[f64], p: &NtnParams) -> Vec<f64> {
    let d = u.len();
    let bil = p.bilinear.as_ref().unwrap();
    let tau: Vec<f64> = o.iter().chain(u).chain(w).copied().collect();
    let k = p.enc_b.nrows();
    let mut z = vec![0.0; k];
    for s in 0..k {
        let mut acc = p.enc_b[(s, 0)];
        for a in 0..d {
            for c in 0..d {
                acc += u[a] * bil[(s, a * d + c)] * w[c];
            }
        }
        for (m, t) in tau.iter().enumerate() {
            acc += p.enc_w[(s, m)] * t;
        }
        z[s] = acc.tanh();
    }
    (0..p.f_b.nrows())
        .map(|j| p.f_b[(j, 0)] + (0..k).map(|s| p.f_w[(j, s)] * z[s]).sum::<f64>())
        .collect()
}

#[test]
fn criterion_06_ntn_matches_naive_evaluator() {
    let streams = Streams::new(6);
    let mut worst = 0.0_f64;
    for i in 0..100u64 {
        let mut rng = streams.stream(Purpose::ParamInit, i);
        let env = if i % 2 == 0 { EnvKind::DynamicProcess } else { EnvKind::TumorGrowth };
        let mut arch = Arch::new(env, EncoderKind::Ntn, 2, 2);
        arch.embed_dim = 1 + (i as usize % 4);
        arch.slices = 1 + (i as usize % 5);
        arch.hidden = 3;
        let mut p = NtnParams::init(arch.clone(), Normalization::identity(arch.obs_dim()), &mut rng).unwrap();
        perturb(&mut p, &mut rng, 0.5);
        let draw = |n: usize, rng: &mut StreamRng| (0..n).map(|_| normal(rng)).collect::<Vec<f64>>();
        let o = draw(arch.obs_dim(), &mut rng);
        let u = draw(arch.embed_dim, &mut rng);
        let w = draw(arch.embed_dim, &mut rng);
        let fast = ntn_forward(&o, &u, &w, &p).unwrap();
        let slow = naive_ntn(&o, &u, &w, &p);
        for (a, b) in fast.iter().zip(&slow) {
            worst = worst.max((a - b).abs());
        }
    }
    let ok = worst <= 1e-12;
    verdict(6, ok, &format!("max abs difference {worst:.2e} over 100 inputs"));
    assert!(ok);
}

// ---------------------------------------------------------------------------
// Estimator

#[test]
fn criterion_07_oracle_plug_in_matches_ground_truth() {
    let cfg = EnvConfig::new(EnvKind::DynamicProcess, 200, 70).with_horizon(20).with_gamma(1.0);
    let (data, latents) = generate(&cfg, &PolicySpec::Behavior).unwrap();
    let model = TrueDynamics::new(cfg.clone(), latents).unwrap();
    let mut lines = Vec::new();
    let mut ok = true;
    for (k, target) in [PolicySpec::TargetA, PolicySpec::TargetB].into_iter().enumerate() {
        let mut ope = OpeConfig::new(target.clone(), 71 + k as u64);
        ope.n_rollouts_per_traj = 100;
        let est = estimate_value(&model, &data.initial_observations(), &ope).unwrap();
        let truth = true_policy_value(&cfg, &target, 10_000, 72 + k as u64).unwrap();
        let se = (est.std_error.powi(2) + truth.std_error.powi(2)).sqrt();
        let z = (est.value - truth.value).abs() / se;
        ok &= z < 3.0;
        lines.push(format!("{}: {:.4} vs {:.4}, {z:.2} se", target.name(), est.value, truth.value));
    }
    verdict(7, ok, &lines.join("; "));
    assert!(ok);
}

// ---------------------------------------------------------------------------
// Desk-scale neural runs on the dynamic process

const DESK_T: usize = 20;
const DESK_REPS: usize = 10;
const DESK_NS: [usize; 3] = [100, 200, 400];
const DESK_METHODS: [VariantKind; 3] = [VariantKind::Twd, VariantKind::OwdNi, VariantKind::OwdNt];

fn desk_hypers() -> HyperParams {
    HyperParams {
        lr: 0.005,
        batch_size: 256,
        weight_decay: 1e-4,
        embed_dim: 2,
        loss_alpha: 0.3,
        max_epochs: 150,
        patience: 10,
        ntn_slices: 4,
        hidden: 16,
        mlp_width: 32,
        ..Default::default()
    }
}

/// Squared errors of every method, pooled over targets A and B.
struct DeskCell {
    sq_err: Vec<Vec<f64>>,
}

impl DeskCell {
    fn lmse(&self, m: usize) -> f64 {
        metrics(&self.sq_err[m].iter().map(|e| e.sqrt()).collect::<Vec<_>>(), 0.0).unwrap().0
    }

    /// Delta-method standard error of the log mean squared error.
    fn lmse_se(&self, m: usize) -> f64 {
        let e = &self.sq_err[m];
        let mu = mean(e);
        let var = e.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (e.len() - 1) as f64;
        (var / e.len() as f64).sqrt() / mu
    }
}

fn desk_cell(n: usize, gamma: f64) -> DeskCell {
    let targets = [PolicySpec::TargetA, PolicySpec::TargetB];
    let truth_cfg = EnvConfig::new(EnvKind::DynamicProcess, 1, 0).with_horizon(DESK_T).with_gamma(gamma);
    let truth: Vec<f64> = targets
        .iter()
        .enumerate()
        .map(|(k, t)| true_policy_value(&truth_cfg, t, 10_000, 800 + k as u64).unwrap().value)
        .collect();
    let mut sq_err = vec![Vec::new(); DESK_METHODS.len()];
    for rep in 0..DESK_REPS {
        let seed = twode::experiment::data_seed(8, n, gamma, rep);
        let cfg = EnvConfig::new(EnvKind::DynamicProcess, n, seed).with_horizon(DESK_T).with_gamma(gamma);
        let data = generate(&cfg, &PolicySpec::Behavior).unwrap().0;
        for (mi, &v) in DESK_METHODS.iter().enumerate() {
            let mut ope = OpeConfig::new(PolicySpec::TargetA, twode::experiment::ope_seed(8, n, gamma, v.name(), rep));
            ope.n_rollouts_per_traj = 20;
            let tseed = twode::experiment::train_seed(8, n, gamma, v.name(), rep);
            let vals = fit_and_evaluate(v, &data, &[desk_hypers()], &targets, &ope, tseed).unwrap();
            for (x, t) in vals.iter().zip(&truth) {
                sq_err[mi].push((x - t).powi(2));
            }
        }
    }
    DeskCell { sq_err }
}

fn desk_gamma_one() -> &'static Vec<DeskCell> {
    static CELL: OnceLock<Vec<DeskCell>> = OnceLock::new();
    CELL.get_or_init(|| DESK_NS.iter().map(|&n| desk_cell(n, 1.0)).collect())
}

#[test]
fn criterion_08_desk_scale_dp_consistency() {
    let cells = desk_gamma_one();
    let twd: Vec<f64> = cells.iter().map(|c| c.lmse(0)).collect();
    let inversions = twd.windows(2).filter(|w| w[1] > w[0]).count();
    let decreasing = twd[2] < twd[0] && inversions <= 1;
    let last = &cells[2];
    let beats = last.lmse(0) < last.lmse(1) && last.lmse(0) < last.lmse(2);
    let ok = decreasing && beats;
    verdict(
        8,
        ok,
        &format!(
            "TWD LMSE over N {DESK_NS:?}: {twd:.3?}; at N=400 OWD_NI {:.3}, OWD_NT {:.3}",
            last.lmse(1),
            last.lmse(2)
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_09_sensitivity_direction() {
    let one = &desk_gamma_one()[2];
    let zero = desk_cell(DESK_NS[2], 0.0);
    let noise = |c: &DeskCell, m: usize| 2.0 * c.lmse_se(m);
    // Lower LMSE is better.
    let twd_not_better = zero.lmse(0) >= one.lmse(0) - (noise(&zero, 0).powi(2) + noise(one, 0).powi(2)).sqrt();
    let adv = |c: &DeskCell| c.lmse(1).min(c.lmse(2)) - c.lmse(0);
    let adv_noise = (noise(&zero, 0).powi(2) + noise(&zero, 1).min(noise(&zero, 2)).powi(2)).sqrt();
    let shrinks = adv(&zero) <= adv(one).max(0.0) + adv_noise;
    let ok = twd_not_better && shrinks;
    verdict(
        9,
        ok,
        &format!(
            "TWD LMSE gamma=0 {:.3} vs gamma=1 {:.3}; advantage over OWD gamma=0 {:.3} vs gamma=1 {:.3}",
            zero.lmse(0),
            one.lmse(0),
            adv(&zero),
            adv(one)
        ),
    );
    assert!(ok);
}

// ---------------------------------------------------------------------------
// Reproducibility

const DET_CONFIG: &str = r#"
[experiment]
recipe = "dp-sweep"
methods = ["TWD", "OWD_NT"]
n_list = [30]
repetitions = 2
seed = 10
truth_rollouts = 300

[env]
horizon = 6

[train]
lr = [0.005]
batch_size = [64]
weight_decay = [0.0001]
embed_dim = [2]
loss_alpha = [0.3]
max_epochs = 8
patience = 3
hidden = 6
mlp_width = 8
slices = 3

[ope]
rollouts_per_traj = 5
"#;

#[test]
fn criterion_10_deterministic_runs_are_byte_identical() {
    let spec = parse_config_str(DET_CONFIG).unwrap();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for (d, workers) in dirs.iter().zip([1, 2]) {
        let opts = RunOptions {
            deterministic: true,
            workers,
            output_dir: Some(d.path().to_path_buf()),
            ..Default::default()
        };
        let m = run(&spec, &opts).unwrap();
        assert!(m.failures.is_empty(), "{:?}", m.failures);
    }
    let files = ["eval.csv", "aggregate.csv", "truth.csv"];
    let same = files.iter().all(|f| {
        std::fs::read(dirs[0].path().join(f)).unwrap() == std::fs::read(dirs[1].path().join(f)).unwrap()
    });
    verdict(10, same, &format!("compared {files:?}"));
    assert!(same);
}

#[test]
fn criterion_11_checkpoint_round_trip() {
    let cfg = EnvConfig::new(EnvKind::DynamicProcess, 12, 11).with_horizon(6);
    let data = generate(&cfg, &PolicySpec::Behavior).unwrap().0;
    let mut ok = true;
    for v in VariantKind::ALL {
        let hp = make_variant(
            v,
            &HyperParams { embed_dim: 3, ntn_slices: 3, hidden: 5, mlp_width: 6, batch_size: 16, seed: 11, ..Default::default() },
        );
        let params = fit_full(&data, &hp, 3).unwrap();
        let first = write_checkpoint(&params);
        let loaded = parse_checkpoint(&first).unwrap();
        let second = write_checkpoint(&loaded);
        let cells: Vec<usize> = (0..40).collect();
        let lc: LossConfig = hp.loss_config();
        let a = loss(&Batch::from_cells(&data, &cells, &params), &params, &lc).unwrap().total;
        let b = loss(&Batch::from_cells(&data, &cells, &loaded), &loaded, &lc).unwrap().total;
        ok &= first == second && a.to_bits() == b.to_bits();
    }
    verdict(11, ok, "save, load, save over every variant; loss compared bitwise");
    assert!(ok);
}
