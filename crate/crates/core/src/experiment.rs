//! Experiment specs, recipes and run manifests.
//!
//! A spec is a TOML file:
//!
//! ```toml
//! [experiment]
//! recipe = "dp-sweep"          # linear-props | dp-sweep | tumor-sweep | sensitivity | ablation
//! methods = ["TWD", "OWD_NI"]
//! n_list = [250, 500]
//! gamma_list = [1.0]
//! repetitions = 20
//! seed = 7
//!
//! [env]
//! horizon = 50
//!
//! [train]
//! lr = [0.005, 0.001]
//! max_epochs = 500
//!
//! [ope]
//! rollouts_per_traj = 100
//! ```
//!
//! Every key is optional except `experiment.recipe`; unknown keys are errors.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ablate::{fit_and_evaluate, write_ablation, AblationRow, VariantKind};
use crate::env::io::{fmt_f64, write_dataset, write_latent_u, write_latent_w, write_patients};
use crate::env::{generate, true_policy_value, EnvConfig, EnvKind, PolicySpec, TumorParams};
use crate::linfe::{replicate, AssumptionKind, ReplicationRow, REPLICATION_HEADER};
use crate::ntn::EncoderKind;
use crate::ope::{metrics, OpeConfig};
use crate::rng::derive_seed;
use crate::train::HyperParams;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Recipe {
    LinearProps,
    DpSweep,
    TumorSweep,
    Sensitivity,
    Ablation,
}

impl Recipe {
    pub fn name(self) -> &'static str {
        match self {
            Recipe::LinearProps => "linear-props",
            Recipe::DpSweep => "dp-sweep",
            Recipe::TumorSweep => "tumor-sweep",
            Recipe::Sensitivity => "sensitivity",
            Recipe::Ablation => "ablation",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        [Recipe::LinearProps, Recipe::DpSweep, Recipe::TumorSweep, Recipe::Sensitivity, Recipe::Ablation]
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::config(format!("experiment.recipe: unknown recipe `{s}`")))
    }

    fn default_env(self) -> EnvKind {
        match self {
            Recipe::LinearProps => EnvKind::Linear,
            Recipe::TumorSweep => EnvKind::TumorGrowth,
            _ => EnvKind::DynamicProcess,
        }
    }

    fn allows(self, env: EnvKind) -> bool {
        match self {
            Recipe::LinearProps => env == EnvKind::Linear,
            Recipe::DpSweep => env == EnvKind::DynamicProcess,
            Recipe::TumorSweep => env == EnvKind::TumorGrowth,
            Recipe::Sensitivity | Recipe::Ablation => env != EnvKind::Linear,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Linear(AssumptionKind),
    Neural(VariantKind),
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Linear(k) => k.name(),
            Method::Neural(v) => v.name(),
        }
    }
}

// ---------------------------------------------------------------------------
// Config file

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    experiment: ExperimentSection,
    #[serde(default)]
    env: EnvSection,
    #[serde(default)]
    tumor: TumorParams,
    #[serde(default)]
    train: TrainSection,
    #[serde(default)]
    ope: OpeSection,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct ExperimentSection {
    recipe: String,
    methods: Option<Vec<String>>,
    n_list: Option<Vec<usize>>,
    gamma_list: Option<Vec<f64>>,
    targets: Option<Vec<String>>,
    #[serde(default = "default_reps")]
    repetitions: usize,
    #[serde(default = "default_out")]
    output_dir: String,
    #[serde(default)]
    seed: u64,
    #[serde(default = "default_truth_rollouts")]
    truth_rollouts: usize,
    #[serde(default)]
    save_checkpoints: bool,
}

fn default_reps() -> usize {
    20
}
fn default_out() -> String {
    "out".into()
}
fn default_truth_rollouts() -> usize {
    10_000
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
struct EnvSection {
    kind: Option<String>,
    horizon: Option<usize>,
    linear_reward_var: f64,
    noise_scale: f64,
    latent_scale: f64,
}

impl Default for EnvSection {
    fn default() -> Self {
        Self { kind: None, horizon: None, linear_reward_var: 2.0, noise_scale: 1.0, latent_scale: 1.0 }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
struct TrainSection {
    lr: Vec<f64>,
    batch_size: Vec<usize>,
    weight_decay: Vec<f64>,
    embed_dim: Vec<usize>,
    loss_alpha: Vec<f64>,
    max_epochs: usize,
    patience: usize,
    slices: usize,
    hidden: usize,
    mlp_width: usize,
    train_fraction: f64,
    val_embed_steps: usize,
    refit: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let h = HyperParams::default();
        Self {
            lr: vec![0.005, 0.001],
            batch_size: vec![256, 512, 1024, 2048, 4096],
            weight_decay: vec![0.01, 0.0001],
            embed_dim: vec![2, 4, 8],
            loss_alpha: vec![0.0, 0.3, 0.5, 0.7],
            max_epochs: h.max_epochs,
            patience: h.patience,
            slices: h.ntn_slices,
            hidden: h.hidden,
            mlp_width: h.mlp_width,
            train_fraction: h.train_fraction,
            val_embed_steps: h.val_embed_steps,
            refit: h.refit,
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
struct OpeSection {
    rollouts_per_traj: usize,
    crossfit: bool,
}

impl Default for OpeSection {
    fn default() -> Self {
        Self { rollouts_per_traj: 100, crossfit: false }
    }
}

/// A fully validated experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub recipe: Recipe,
    /// Template: `n_trajectories`, `gamma` and `seed` are set per cell.
    pub env: EnvConfig,
    pub methods: Vec<Method>,
    pub n_list: Vec<usize>,
    pub gamma_list: Vec<f64>,
    pub targets: Vec<PolicySpec>,
    pub repetitions: usize,
    pub output_dir: PathBuf,
    pub master_seed: u64,
    pub truth_rollouts: usize,
    pub save_checkpoints: bool,
    pub grid: Vec<HyperParams>,
    pub rollouts_per_traj: usize,
    pub crossfit: bool,
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Parses and validates a spec from TOML text.
pub fn parse_config_str(text: &str) -> Result<ExperimentSpec> {
    let file: ConfigFile = toml::from_str(text).map_err(|e| Error::Syntax {
        line: e.span().map_or(1, |s| line_of(text, s.start)),
        message: e.message().to_string(),
    })?;
    file.into_spec()
}

pub fn parse_config(path: impl AsRef<Path>) -> Result<ExperimentSpec> {
    parse_config_str(&std::fs::read_to_string(path)?)
}

fn non_empty<T>(field: &str, v: &[T]) -> Result<()> {
    if v.is_empty() {
        return Err(Error::config(format!("{field}: list must not be empty")));
    }
    Ok(())
}

impl ConfigFile {
    fn into_spec(self) -> Result<ExperimentSpec> {
        let ex = &self.experiment;
        let recipe = Recipe::parse(&ex.recipe)?;
        let kind = match &self.env.kind {
            Some(k) => k.parse::<EnvKind>().map_err(|e| Error::config(format!("env.kind: {e}")))?,
            None => recipe.default_env(),
        };
        if !recipe.allows(kind) {
            return Err(Error::config(format!(
                "experiment.recipe: `{}` cannot run on env `{}`",
                recipe.name(),
                kind.name()
            )));
        }
        let methods: Vec<Method> = match &ex.methods {
            None if recipe == Recipe::LinearProps => AssumptionKind::ALL.iter().map(|&k| Method::Linear(k)).collect(),
            None if recipe == Recipe::Ablation => VariantKind::ALL.iter().map(|&v| Method::Neural(v)).collect(),
            None => vec![Method::Neural(VariantKind::Twd)],
            Some(list) => list
                .iter()
                .map(|m| {
                    if recipe == Recipe::LinearProps {
                        AssumptionKind::ALL
                            .into_iter()
                            .find(|k| k.name() == m)
                            .map(Method::Linear)
                            .ok_or_else(|| Error::config(format!("experiment.methods: unknown linear method `{m}`")))
                    } else {
                        m.parse::<VariantKind>()
                            .map(Method::Neural)
                            .map_err(|e| Error::config(format!("experiment.methods: {e}")))
                    }
                })
                .collect::<Result<_>>()?,
        };
        non_empty("experiment.methods", &methods)?;
        let n_list = ex.n_list.clone().unwrap_or_else(|| match recipe {
            Recipe::LinearProps => (2..=8).map(|k| k * 100).collect(),
            Recipe::Ablation => vec![1000],
            Recipe::Sensitivity => vec![1000],
            _ => vec![250, 500, 1000, 1500, 2000],
        });
        non_empty("experiment.n_list", &n_list)?;
        if n_list.iter().any(|&n| n < 2) {
            return Err(Error::config("experiment.n_list: every N must be >= 2"));
        }
        let gamma_list = ex.gamma_list.clone().unwrap_or_else(|| match recipe {
            Recipe::Sensitivity => vec![0.0, 0.3, 0.7, 1.0],
            _ => vec![1.0],
        });
        non_empty("experiment.gamma_list", &gamma_list)?;
        for g in &gamma_list {
            if !(0.0..=1.0).contains(g) {
                return Err(Error::config(format!("experiment.gamma_list: gamma = {g} is outside [0, 1]")));
            }
        }
        if recipe == Recipe::Ablation && (n_list.len() != 1 || gamma_list.len() != 1) {
            return Err(Error::config("experiment: the ablation recipe takes exactly one N and one gamma"));
        }
        let targets: Vec<PolicySpec> = match &ex.targets {
            Some(t) => t
                .iter()
                .map(|s| PolicySpec::parse_target(s, kind).map_err(|e| Error::config(format!("experiment.targets: {e}"))))
                .collect::<Result<_>>()?,
            None if kind == EnvKind::Linear => vec![PolicySpec::TargetRandom(0.5)],
            None => vec![PolicySpec::parse_target("A", kind)?, PolicySpec::parse_target("B", kind)?],
        };
        non_empty("experiment.targets", &targets)?;
        if ex.repetitions == 0 {
            return Err(Error::config("experiment.repetitions: must be >= 1"));
        }
        if ex.truth_rollouts == 0 {
            return Err(Error::config("experiment.truth_rollouts: must be >= 1"));
        }
        let mut env = EnvConfig::new(kind, n_list[0], 0);
        env.horizon = self.env.horizon.unwrap_or(kind.default_horizon());
        env.linear_reward_var = self.env.linear_reward_var;
        env.noise_scale = self.env.noise_scale;
        env.latent_scale = self.env.latent_scale;
        env.tumor = self.tumor.clone();
        env.validate().map_err(|e| Error::config(format!("env: {e}")))?;

        let tr = &self.train;
        for (name, len) in [
            ("train.lr", tr.lr.len()),
            ("train.batch_size", tr.batch_size.len()),
            ("train.weight_decay", tr.weight_decay.len()),
            ("train.embed_dim", tr.embed_dim.len()),
            ("train.loss_alpha", tr.loss_alpha.len()),
        ] {
            if len == 0 {
                return Err(Error::config(format!("{name}: list must not be empty")));
            }
        }
        let base = HyperParams {
            max_epochs: tr.max_epochs,
            patience: tr.patience,
            ntn_slices: tr.slices,
            hidden: tr.hidden,
            mlp_width: tr.mlp_width,
            train_fraction: tr.train_fraction,
            val_embed_steps: tr.val_embed_steps,
            refit: tr.refit,
            encoder: EncoderKind::Ntn,
            ..HyperParams::default()
        };
        let mut grid = Vec::new();
        for &lr in &tr.lr {
            for &batch_size in &tr.batch_size {
                for &weight_decay in &tr.weight_decay {
                    for &embed_dim in &tr.embed_dim {
                        for &loss_alpha in &tr.loss_alpha {
                            let h = HyperParams { lr, batch_size, weight_decay, embed_dim, loss_alpha, ..base.clone() };
                            h.validate().map_err(|e| Error::config(format!("train: {e}")))?;
                            grid.push(h);
                        }
                    }
                }
            }
        }
        if !(tr.train_fraction > 0.0 && tr.train_fraction < 1.0) {
            return Err(Error::config("train.train_fraction: must be in (0, 1)"));
        }
        if tr.slices == 0 || tr.hidden == 0 || tr.mlp_width == 0 || tr.embed_dim.contains(&0) {
            return Err(Error::config("train: network sizes must be >= 1"));
        }
        if self.ope.rollouts_per_traj == 0 {
            return Err(Error::config("ope.rollouts_per_traj: must be >= 1"));
        }
        Ok(ExperimentSpec {
            recipe,
            env,
            methods,
            n_list,
            gamma_list,
            targets,
            repetitions: ex.repetitions,
            output_dir: PathBuf::from(&ex.output_dir),
            master_seed: ex.seed,
            truth_rollouts: ex.truth_rollouts,
            save_checkpoints: ex.save_checkpoints,
            grid,
            rollouts_per_traj: self.ope.rollouts_per_traj,
            crossfit: self.ope.crossfit,
        })
    }
}

impl ExperimentSpec {
    /// SHA-256 of the canonical form of the validated spec.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(format!("{self:?}").as_bytes()))
    }

    /// Desk-scale reduction: N / 10 (at least 20), T at most 10, at most
    /// 3 repetitions, 20 epochs with patience 5, 10 rollouts per
    /// trajectory, truth rollouts / 20 (at least 200), and only the first
    /// grid cell.
    pub fn shrink_for_fast(&mut self) {
        for n in &mut self.n_list {
            *n = (*n / 10).max(20);
        }
        self.n_list.dedup();
        self.env.horizon = self.env.horizon.min(10);
        self.repetitions = self.repetitions.min(3);
        self.grid.truncate(1);
        for h in &mut self.grid {
            h.max_epochs = h.max_epochs.min(20);
            h.patience = h.patience.min(5);
        }
        self.rollouts_per_traj = self.rollouts_per_traj.min(10);
        self.truth_rollouts = (self.truth_rollouts / 20).max(200);
    }

    pub fn env_for(&self, n: usize, gamma: f64, seed: u64) -> EnvConfig {
        EnvConfig { n_trajectories: n, gamma, seed, ..self.env.clone() }
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn gamma_tag(gamma: f64) -> String {
    format!("{:016x}", gamma.to_bits())
}

/// Seed of the dataset for `(N, gamma, repetition)`.
pub fn data_seed(master: u64, n: usize, gamma: f64, rep: usize) -> u64 {
    derive_seed(master, &["data", &n.to_string(), &gamma_tag(gamma), &rep.to_string()])
}

/// Seed of the training run of `method` on that dataset.
pub fn train_seed(master: u64, n: usize, gamma: f64, method: &str, rep: usize) -> u64 {
    derive_seed(master, &["train", &n.to_string(), &gamma_tag(gamma), method, &rep.to_string()])
}

/// Seed of the Monte Carlo rollouts of `method` on that dataset.
pub fn ope_seed(master: u64, n: usize, gamma: f64, method: &str, rep: usize) -> u64 {
    derive_seed(master, &["ope", &n.to_string(), &gamma_tag(gamma), method, &rep.to_string()])
}

/// Seed of the ground-truth rollouts for `(env, gamma, target)`.
pub fn truth_seed(master: u64, env: EnvKind, gamma: f64, target: &PolicySpec) -> u64 {
    derive_seed(master, &["truth", env.name(), &gamma_tag(gamma), &target.name()])
}

// ---------------------------------------------------------------------------
// Running

#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    pub fast: bool,
    pub workers: usize,
    pub deterministic: bool,
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { fast: false, workers: 1, deterministic: false, seed: None, output_dir: None }
    }
}

impl RunOptions {
    /// Applies the overrides to `spec`.
    pub fn apply(&self, spec: &mut ExperimentSpec) {
        if let Some(s) = self.seed {
            spec.master_seed = s;
        }
        if let Some(o) = &self.output_dir {
            spec.output_dir = o.clone();
        }
        if self.fast {
            spec.shrink_for_fast();
        }
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.workers.max(1))
            .build()
            .map_err(|e| Error::config(format!("worker pool: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellRecord {
    pub n: usize,
    pub gamma: f64,
    pub rep: usize,
    pub method: String,
    #[serde(serialize_with = "seed_str")]
    pub data_seed: u64,
    #[serde(serialize_with = "seed_str")]
    pub train_seed: u64,
    pub ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OutputFile {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub spec_hash: String,
    pub version: String,
    pub recipe: String,
    #[serde(serialize_with = "seed_str")]
    pub master_seed: u64,
    pub deterministic: bool,
    pub fast: bool,
    pub wall_clock_s: f64,
    pub failures: Vec<String>,
    pub cells: Vec<CellRecord>,
    pub outputs: Vec<OutputFile>,
}

impl RunManifest {
    pub fn has_failures(&self) -> bool {
        !self.failures.is_empty()
    }
}

// TOML integers are signed 64-bit, so seeds are written as strings.
fn seed_str<S: serde::Serializer>(seed: &u64, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(&seed.to_string())
}

pub const MANIFEST_NAME: &str = "manifest.toml";
pub const EVAL_HEADER: &str = "env,method,N,T,gamma,target,seed,eta_hat,eta_true,runtime_s";
pub const AGGREGATE_HEADER: &str = "env,method,N,T,gamma,target,runs,lmse,bias";
pub const TRUTH_HEADER: &str = "env,gamma,target,eta_true,std_error,rollouts";

/// One evaluated (cell, method, target).
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub env: EnvKind,
    pub method: String,
    pub n: usize,
    pub t: usize,
    pub gamma: f64,
    pub target: String,
    pub seed: u64,
    pub eta_hat: f64,
    pub eta_true: f64,
    pub runtime_s: f64,
}

impl EvalRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.env.name(),
            self.method,
            self.n,
            self.t,
            self.gamma,
            self.target,
            self.seed,
            fmt_f64(self.eta_hat),
            fmt_f64(self.eta_true),
            fmt_f64(self.runtime_s)
        )
    }
}

struct Outputs {
    dir: PathBuf,
    files: Vec<PathBuf>,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Self { dir: dir.to_path_buf(), files: Vec::new() })
    }

    fn write(&mut self, rel: impl AsRef<Path>, contents: &str) -> Result<()> {
        let path = self.dir.join(rel.as_ref());
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&path, contents)?;
        self.files.push(rel.as_ref().to_path_buf());
        Ok(())
    }

    fn finish(mut self, mut manifest: RunManifest) -> Result<RunManifest> {
        self.files.sort();
        self.files.dedup();
        manifest.outputs = self
            .files
            .iter()
            .map(|rel| {
                let bytes = std::fs::read(self.dir.join(rel))?;
                Ok(OutputFile { path: rel.to_string_lossy().replace('\\', "/"), sha256: hex(&Sha256::digest(&bytes)) })
            })
            .collect::<Result<_>>()?;
        manifest.outputs.push(OutputFile { path: MANIFEST_NAME.into(), sha256: String::new() });
        let text = toml::to_string(&manifest).map_err(|e| Error::config(format!("manifest: {e}")))?;
        std::fs::write(self.dir.join(MANIFEST_NAME), text)?;
        Ok(manifest)
    }
}

/// Runs the spec's recipe and writes results plus `manifest.toml` into the
/// output directory. Failed cells are listed in the manifest.
pub fn run(spec: &ExperimentSpec, opts: &RunOptions) -> Result<RunManifest> {
    let mut spec = spec.clone();
    opts.apply(&mut spec);
    let start = Instant::now();
    let mut out = Outputs::new(&spec.output_dir)?;
    let pool = opts.pool()?;
    let mut manifest = RunManifest {
        spec_hash: spec.hash(),
        version: env!("CARGO_PKG_VERSION").into(),
        recipe: spec.recipe.name().into(),
        master_seed: spec.master_seed,
        deterministic: opts.deterministic,
        fast: opts.fast,
        wall_clock_s: 0.0,
        failures: Vec::new(),
        cells: Vec::new(),
        outputs: Vec::new(),
    };
    match spec.recipe {
        Recipe::LinearProps => run_linear(&spec, &pool, &mut out, &mut manifest)?,
        _ => run_neural(&spec, &pool, opts.deterministic, &mut out, &mut manifest)?,
    }
    manifest.wall_clock_s = start.elapsed().as_secs_f64();
    out.finish(manifest)
}

fn run_linear(spec: &ExperimentSpec, pool: &rayon::ThreadPool, out: &mut Outputs, manifest: &mut RunManifest) -> Result<()> {
    let jobs: Vec<(usize, usize)> =
        spec.n_list.iter().flat_map(|&n| (0..spec.repetitions).map(move |r| (n, r))).collect();
    let gamma = spec.gamma_list[0];
    let results: Vec<(usize, usize, u64, Result<Vec<ReplicationRow>>)> = pool.install(|| {
        jobs.par_iter()
            .map(|&(n, rep)| {
                let seed = data_seed(spec.master_seed, n, gamma, rep);
                let res = (|| {
                    let cfg = spec.env_for(n, gamma, seed);
                    let (data, latents) = generate(&cfg, &PolicySpec::Behavior)?;
                    let ope = OpeConfig {
                        n_rollouts_per_traj: spec.rollouts_per_traj,
                        target: spec.targets[0].clone(),
                        crossfit: false,
                        seed: ope_seed(spec.master_seed, n, gamma, "linear", rep),
                    };
                    replicate(&data, &latents, cfg.linear_reward_var * cfg.noise_scale.powi(2), &ope, seed)
                })();
                (n, rep, seed, res)
            })
            .collect()
    });
    let mut table = format!("{REPLICATION_HEADER}\n");
    let mut kept: Vec<ReplicationRow> = Vec::new();
    for (n, rep, seed, res) in results {
        let ok = res.is_ok();
        match res {
            Ok(rows) => {
                for r in rows {
                    if spec.methods.contains(&Method::Linear(r.assumption)) {
                        table.push_str(&r.csv_line());
                        table.push('\n');
                        kept.push(r);
                    }
                }
            }
            Err(e) => manifest.failures.push(format!("N={n} rep={rep}: {e}")),
        }
        for m in &spec.methods {
            manifest.cells.push(CellRecord {
                n,
                gamma,
                rep,
                method: m.name().into(),
                data_seed: seed,
                train_seed: seed,
                ok,
            });
        }
    }
    out.write("linear_props.csv", &table)?;
    let mut summary = String::from("assumption,N,T,runs,train_mse,theory_mse,ope_mse\n");
    for &n in &spec.n_list {
        for m in &spec.methods {
            let rows: Vec<&ReplicationRow> =
                kept.iter().filter(|r| r.n == n && Method::Linear(r.assumption) == *m).collect();
            if rows.is_empty() {
                continue;
            }
            let k = rows.len() as f64;
            let mean = |f: fn(&ReplicationRow) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / k;
            summary.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                m.name(),
                n,
                spec.env.horizon,
                rows.len(),
                fmt_f64(mean(|r| r.train_mse)),
                fmt_f64(mean(|r| r.theory_mse)),
                fmt_f64(mean(|r| r.ope_mse))
            ));
        }
    }
    out.write("linear_summary.csv", &summary)
}

/// Ground-truth value of every `(gamma, target)`.
fn truths(spec: &ExperimentSpec, pool: &rayon::ThreadPool) -> Result<Vec<Vec<(f64, f64)>>> {
    pool.install(|| {
        spec.gamma_list
            .par_iter()
            .map(|&g| {
                spec.targets
                    .iter()
                    .map(|target| {
                        let cfg = spec.env_for(1, g, 0);
                        let seed = truth_seed(spec.master_seed, cfg.kind, g, target);
                        let v = true_policy_value(&cfg, target, spec.truth_rollouts, seed)?;
                        Ok((v.value, v.std_error))
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect()
    })
}

struct NeuralCell {
    n: usize,
    gi: usize,
    rep: usize,
}

fn run_neural(
    spec: &ExperimentSpec,
    pool: &rayon::ThreadPool,
    deterministic: bool,
    out: &mut Outputs,
    manifest: &mut RunManifest,
) -> Result<()> {
    let truth = truths(spec, pool)?;
    let mut truth_csv = format!("{TRUTH_HEADER}\n");
    for (gi, &g) in spec.gamma_list.iter().enumerate() {
        for (k, target) in spec.targets.iter().enumerate() {
            truth_csv.push_str(&format!(
                "{},{},{},{},{},{}\n",
                spec.env.kind.name(),
                g,
                target.name(),
                fmt_f64(truth[gi][k].0),
                fmt_f64(truth[gi][k].1),
                spec.truth_rollouts
            ));
        }
    }
    out.write("truth.csv", &truth_csv)?;

    let mut cells = Vec::new();
    for &n in &spec.n_list {
        for gi in 0..spec.gamma_list.len() {
            for rep in 0..spec.repetitions {
                cells.push(NeuralCell { n, gi, rep });
            }
        }
    }
    type MethodResult = (Method, u64, f64, Result<Vec<f64>>);
    let results: Vec<(u64, Vec<MethodResult>, Vec<(String, String)>)> = pool.install(|| {
        cells
            .par_iter()
            .map(|c| {
                let gamma = spec.gamma_list[c.gi];
                let dseed = data_seed(spec.master_seed, c.n, gamma, c.rep);
                let cfg = spec.env_for(c.n, gamma, dseed);
                let mut files = Vec::new();
                let data = match generate(&cfg, &PolicySpec::Behavior) {
                    Ok((d, _)) => d,
                    Err(e) => {
                        let failed = spec
                            .methods
                            .iter()
                            .map(|&m| (m, 0, 0.0, Err(Error::config(format!("data generation: {e}")))))
                            .collect();
                        return (dseed, failed, files);
                    }
                };
                let per_method = spec
                    .methods
                    .iter()
                    .map(|&m| {
                        let Method::Neural(kind) = m else { unreachable!("validated") };
                        let tseed = train_seed(spec.master_seed, c.n, gamma, m.name(), c.rep);
                        let ope = OpeConfig {
                            n_rollouts_per_traj: spec.rollouts_per_traj,
                            target: spec.targets[0].clone(),
                            crossfit: spec.crossfit,
                            seed: ope_seed(spec.master_seed, c.n, gamma, m.name(), c.rep),
                        };
                        let t0 = Instant::now();
                        let res = if spec.save_checkpoints && !spec.crossfit {
                            checkpointed_fit(kind, &data, spec, &ope, tseed).map(|(vals, ckpt, curve)| {
                                let stem = format!("checkpoints/N{}_g{}_r{}_{}", c.n, gamma, c.rep, m.name());
                                files.push((format!("{stem}.ckpt"), ckpt));
                                files.push((format!("{stem}_curve.csv"), curve));
                                vals
                            })
                        } else {
                            fit_and_evaluate(kind, &data, &spec.grid, &spec.targets, &ope, tseed)
                        };
                        let runtime = if deterministic { 0.0 } else { t0.elapsed().as_secs_f64() };
                        (m, tseed, runtime, res)
                    })
                    .collect();
                (dseed, per_method, files)
            })
            .collect()
    });

    let mut eval = format!("{EVAL_HEADER}\n");
    let mut rows: Vec<EvalRow> = Vec::new();
    for (c, (dseed, per_method, files)) in cells.iter().zip(results) {
        let gamma = spec.gamma_list[c.gi];
        for (path, text) in files {
            out.write(path, &text)?;
        }
        for (m, tseed, runtime, res) in per_method {
            let ok = res.is_ok();
            match res {
                Ok(vals) => {
                    for (k, (target, eta_hat)) in spec.targets.iter().zip(vals).enumerate() {
                        let row = EvalRow {
                            env: spec.env.kind,
                            method: m.name().into(),
                            n: c.n,
                            t: spec.env.horizon,
                            gamma,
                            target: target.name(),
                            seed: tseed,
                            eta_hat,
                            eta_true: truth[c.gi][k].0,
                            runtime_s: runtime,
                        };
                        eval.push_str(&row.csv_line());
                        eval.push('\n');
                        rows.push(row);
                    }
                }
                Err(e) => manifest.failures.push(format!(
                    "N={} gamma={} rep={} method={}: {e}",
                    c.n,
                    gamma,
                    c.rep,
                    m.name()
                )),
            }
            manifest.cells.push(CellRecord {
                n: c.n,
                gamma,
                rep: c.rep,
                method: m.name().into(),
                data_seed: dseed,
                train_seed: tseed,
                ok,
            });
        }
    }
    out.write("eval.csv", &eval)?;

    let mut agg = format!("{AGGREGATE_HEADER}\n");
    let mut ablation_rows = Vec::new();
    for &n in &spec.n_list {
        for (gi, &gamma) in spec.gamma_list.iter().enumerate() {
            for (k, target) in spec.targets.iter().enumerate() {
                for m in &spec.methods {
                    let est: Vec<f64> = rows
                        .iter()
                        .filter(|r| r.n == n && r.gamma == gamma && r.method == m.name() && r.target == target.name())
                        .map(|r| r.eta_hat)
                        .collect();
                    if est.is_empty() {
                        continue;
                    }
                    let (lmse, bias) = metrics(&est, truth[gi][k].0)?;
                    agg.push_str(&format!(
                        "{},{},{},{},{},{},{},{},{}\n",
                        spec.env.kind.name(),
                        m.name(),
                        n,
                        spec.env.horizon,
                        gamma,
                        target.name(),
                        est.len(),
                        fmt_f64(lmse),
                        fmt_f64(bias)
                    ));
                    if let Method::Neural(variant) = *m {
                        ablation_rows.push(AblationRow {
                            env: spec.env.kind.name().into(),
                            target: target.name(),
                            variant,
                            lmse,
                            bias,
                        });
                    }
                }
            }
        }
    }
    out.write("aggregate.csv", &agg)?;
    if spec.recipe == Recipe::Ablation {
        out.write("ablation.csv", &write_ablation(&ablation_rows))?;
    }
    Ok(())
}

/// Like [`fit_and_evaluate`] but also returns the checkpoint and curve text.
fn checkpointed_fit(
    kind: VariantKind,
    data: &crate::env::Dataset,
    spec: &ExperimentSpec,
    ope: &OpeConfig,
    seed: u64,
) -> Result<(Vec<f64>, String, String)> {
    let grid: Vec<HyperParams> =
        spec.grid.iter().map(|h| HyperParams { seed, ..crate::ablate::make_variant(kind, h) }).collect();
    let (params, report) = crate::train::train_model(data, &grid)?;
    let vals = spec
        .targets
        .iter()
        .map(|t| {
            let cfg = OpeConfig { target: t.clone(), ..ope.clone() };
            Ok(crate::ope::estimate_with_params(&params, data, &cfg)?.value)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok((vals, crate::ntn::write_checkpoint(&params), crate::train::write_curve(&report)))
}

/// Writes the dataset and latent files of every `(N, gamma, repetition)`.
pub fn generate_all(spec: &ExperimentSpec, opts: &RunOptions) -> Result<RunManifest> {
    let mut spec = spec.clone();
    opts.apply(&mut spec);
    let start = Instant::now();
    let mut out = Outputs::new(&spec.output_dir)?;
    let mut manifest = RunManifest {
        spec_hash: spec.hash(),
        version: env!("CARGO_PKG_VERSION").into(),
        recipe: "gen".into(),
        master_seed: spec.master_seed,
        deterministic: opts.deterministic,
        fast: opts.fast,
        wall_clock_s: 0.0,
        failures: Vec::new(),
        cells: Vec::new(),
        outputs: Vec::new(),
    };
    for &n in &spec.n_list {
        for &gamma in &spec.gamma_list {
            for rep in 0..spec.repetitions {
                let seed = data_seed(spec.master_seed, n, gamma, rep);
                let (data, latents) = generate(&spec.env_for(n, gamma, seed), &PolicySpec::Behavior)?;
                let dir = dataset_dir(n, gamma, rep);
                out.write(dir.join("dataset.csv"), &write_dataset(&data))?;
                out.write(dir.join("latent_u.csv"), &write_latent_u(&latents))?;
                out.write(dir.join("latent_w.csv"), &write_latent_w(&latents))?;
                if spec.env.kind == EnvKind::TumorGrowth {
                    out.write(dir.join("patients.csv"), &write_patients(&latents))?;
                }
                manifest.cells.push(CellRecord {
                    n,
                    gamma,
                    rep,
                    method: "data".into(),
                    data_seed: seed,
                    train_seed: 0,
                    ok: true,
                });
            }
        }
    }
    manifest.wall_clock_s = start.elapsed().as_secs_f64();
    out.finish(manifest)
}

/// Relative directory of one generated dataset.
pub fn dataset_dir(n: usize, gamma: f64, rep: usize) -> PathBuf {
    PathBuf::from(format!("data/N{n}_g{gamma}_r{rep}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_file_gets_defaults() {
        let s = parse_config_str("[experiment]\nrecipe = \"dp-sweep\"\n").unwrap();
        assert_eq!(s.env.horizon, 50);
        assert_eq!(s.repetitions, 20);
        assert_eq!(s.rollouts_per_traj, 100);
        assert_eq!(s.grid.len(), 240);
        assert_eq!(s.targets, vec![PolicySpec::TargetA, PolicySpec::TargetB]);
    }

    #[test]
    fn gamma_out_of_range() {
        let e = parse_config_str("[experiment]\nrecipe = \"dp-sweep\"\ngamma_list = [1.5]\n").unwrap_err();
        assert!(e.to_string().contains("outside [0, 1]"), "{e}");
    }

    #[test]
    fn recipe_env_mismatch() {
        let e = parse_config_str("[experiment]\nrecipe = \"tumor-sweep\"\n[env]\nkind = \"Linear\"\n").unwrap_err();
        assert!(matches!(e, Error::Config(_)));
    }

    #[test]
    fn empty_methods_rejected() {
        let e = parse_config_str("[experiment]\nrecipe = \"dp-sweep\"\nmethods = []\n").unwrap_err();
        assert!(e.to_string().contains("methods"), "{e}");
    }

    #[test]
    fn unknown_key_and_syntax_errors_carry_line() {
        let e = parse_config_str("[experiment]\nrecipe = \"dp-sweep\"\nbogus = 3\n").unwrap_err();
        assert!(matches!(e, Error::Syntax { line: 3, .. }), "{e:?}");
        let e = parse_config_str("[experiment]\n\nrecipe = = 1\n").unwrap_err();
        assert!(matches!(e, Error::Syntax { line: 3, .. }), "{e:?}");
    }

    #[test]
    fn seeds_are_pure_and_distinct() {
        assert_eq!(data_seed(1, 100, 1.0, 0), data_seed(1, 100, 1.0, 0));
        assert_ne!(data_seed(1, 100, 1.0, 0), data_seed(1, 100, 0.3, 0));
        assert_ne!(train_seed(1, 100, 1.0, "TWD", 0), train_seed(1, 100, 1.0, "OWD_NI", 0));
    }

    #[test]
    fn hash_is_stable() {
        let a = parse_config_str("[experiment]\nrecipe = \"linear-props\"\n").unwrap();
        let b = parse_config_str("[experiment]\nrecipe   = \"linear-props\"\n\n").unwrap();
        assert_eq!(a.hash(), b.hash());
    }
}
