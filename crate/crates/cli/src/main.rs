//! `twode` experiment driver.
//!
//! Exit codes: 0 on success, 2 when some cells failed, 1 on configuration
//! or I/O errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use twode::ablate::{make_variant, VariantKind};
use twode::env::io::{fmt_f64, read_dataset};
use twode::env::{generate, Dataset, PolicySpec};
use twode::experiment::{
    self, data_seed, ope_seed, parse_config, train_seed, ExperimentSpec, Method, RunManifest, RunOptions,
};
use twode::ntn::{load_checkpoint, save_checkpoint};
use twode::ope::{estimate_with_params, OpeConfig};
use twode::train::{train_model, write_curve, write_report, HyperParams};

#[derive(Parser)]
#[command(name = "twode", version, about = "Two-way deconfounder off-policy evaluation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate behavior datasets for every (N, gamma, repetition).
    Gen(Common),
    /// Train one model on a dataset and write its checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset CSV; simulated from the config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Method name (defaults to the first configured method).
        #[arg(long)]
        method: Option<String>,
    },
    /// Estimate target-policy values from a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset CSV providing the initial observations.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Run the configured recipe end to end.
    Run(Common),
    /// Validate a config and print the resolved spec.
    Check(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Desk-scale run with shrunken N, T, epochs and rollouts.
    #[arg(long)]
    fast: bool,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Zero the runtime column so result files are byte-reproducible.
    #[arg(long)]
    deterministic: bool,
}

impl Common {
    fn load(&self) -> twode::Result<(ExperimentSpec, RunOptions)> {
        let spec = parse_config(&self.config)?;
        let opts = RunOptions {
            fast: self.fast,
            workers: self.workers,
            deterministic: self.deterministic,
            seed: self.seed,
            output_dir: self.out.clone(),
        };
        Ok((spec, opts))
    }

    /// Spec with the command-line overrides applied.
    fn resolved(&self) -> twode::Result<ExperimentSpec> {
        let (mut spec, opts) = self.load()?;
        opts.apply(&mut spec);
        Ok(spec)
    }
}

enum Outcome {
    Done,
    Partial(usize),
}

fn report(m: &RunManifest) -> Outcome {
    for f in &m.failures {
        eprintln!("failed: {f}");
    }
    println!("wrote {} files", m.outputs.len());
    if m.has_failures() {
        Outcome::Partial(m.failures.len())
    } else {
        Outcome::Done
    }
}

fn load_or_generate(spec: &ExperimentSpec, data: Option<&Path>) -> twode::Result<Dataset> {
    match data {
        Some(p) => read_dataset(&std::fs::read_to_string(p)?),
        None => {
            let (n, g) = (spec.n_list[0], spec.gamma_list[0]);
            let cfg = spec.env_for(n, g, data_seed(spec.master_seed, n, g, 0));
            Ok(generate(&cfg, &PolicySpec::Behavior)?.0)
        }
    }
}

fn neural_method(spec: &ExperimentSpec, name: Option<&str>) -> twode::Result<VariantKind> {
    match name {
        Some(s) => s.parse(),
        None => match spec.methods[0] {
            Method::Neural(v) => Ok(v),
            Method::Linear(_) => Err(twode::Error::Config("train: linear methods have no checkpoint".into())),
        },
    }
}

fn cmd_train(common: &Common, data: Option<&Path>, method: Option<&str>) -> twode::Result<Outcome> {
    let spec = common.resolved()?;
    let kind = neural_method(&spec, method)?;
    let ds = load_or_generate(&spec, data)?;
    let seed = train_seed(spec.master_seed, ds.n, spec.gamma_list[0], kind.name(), 0);
    let grid: Vec<HyperParams> =
        spec.grid.iter().map(|h| HyperParams { seed, ..make_variant(kind, h) }).collect();
    let (params, rep) = train_model(&ds, &grid)?;
    std::fs::create_dir_all(&spec.output_dir)?;
    let ckpt = spec.output_dir.join(format!("{}.ckpt", kind.name()));
    save_checkpoint(&params, &ckpt)?;
    std::fs::write(spec.output_dir.join(format!("{}_curve.csv", kind.name())), write_curve(&rep))?;
    std::fs::write(spec.output_dir.join(format!("{}_report.txt", kind.name())), write_report(&rep))?;
    println!("best epoch {} val loss {:e}; checkpoint {}", rep.best_epoch, rep.best_val_loss, ckpt.display());
    Ok(Outcome::Done)
}

fn cmd_eval(common: &Common, checkpoint: &Path, data: Option<&Path>) -> twode::Result<Outcome> {
    let spec = common.resolved()?;
    let params = load_checkpoint(checkpoint)?;
    let ds = load_or_generate(&spec, data)?;
    let mut out = String::from("target,eta_hat,std_error\n");
    for (k, target) in spec.targets.iter().enumerate() {
        let mut cfg = OpeConfig::new(target.clone(), ope_seed(spec.master_seed, ds.n, spec.gamma_list[0], "eval", k));
        cfg.n_rollouts_per_traj = spec.rollouts_per_traj;
        let v = estimate_with_params(&params, &ds, &cfg)?;
        out.push_str(&format!("{},{},{}\n", target.name(), fmt_f64(v.value), fmt_f64(v.std_error)));
    }
    std::fs::create_dir_all(&spec.output_dir)?;
    std::fs::write(spec.output_dir.join("estimates.csv"), &out)?;
    print!("{out}");
    Ok(Outcome::Done)
}

fn cmd_check(common: &Common) -> twode::Result<Outcome> {
    let spec = common.resolved()?;
    println!("recipe      {}", spec.recipe.name());
    println!("env         {} (T = {})", spec.env.kind.name(), spec.env.horizon);
    println!("methods     {}", spec.methods.iter().map(|m| m.name()).collect::<Vec<_>>().join(", "));
    println!("N           {:?}", spec.n_list);
    println!("gamma       {:?}", spec.gamma_list);
    println!("targets     {}", spec.targets.iter().map(|t| t.name()).collect::<Vec<_>>().join(", "));
    println!("repetitions {}", spec.repetitions);
    println!("grid cells  {}", spec.grid.len());
    println!("spec hash   {}", spec.hash());
    Ok(Outcome::Done)
}

fn dispatch(cli: &Cli) -> twode::Result<Outcome> {
    match &cli.cmd {
        Cmd::Gen(c) => {
            let (spec, opts) = c.load()?;
            Ok(report(&experiment::generate_all(&spec, &opts)?))
        }
        Cmd::Run(c) => {
            let (spec, opts) = c.load()?;
            Ok(report(&experiment::run(&spec, &opts)?))
        }
        Cmd::Train { common, data, method } => cmd_train(common, data.as_deref(), method.as_deref()),
        Cmd::Eval { common, checkpoint, data } => cmd_eval(common, checkpoint, data.as_deref()),
        Cmd::Check(c) => cmd_check(c),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::Partial(k)) => {
            eprintln!("{k} cell(s) failed; see manifest.toml");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
