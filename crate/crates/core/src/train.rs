//! Minibatch Adam training of the network with a trajectory-level
//! train/validation split, early stopping and grid search.
//!
//! Validation trajectories have their own `u_i` rows that the training
//! batches never touch. Those rows are fitted after every epoch with all
//! shared parameters frozen, and the validation loss is the mean transition
//! NLL per validation cell under the fitted rows.

use std::fmt::Write as _;

use rand::seq::SliceRandom;

use crate::env::Dataset;
use crate::ntn::{loss, loss_and_grad, Arch, Batch, EncoderKind, LossConfig, NtnParams, Normalization};
use crate::rng::{Purpose, Streams};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct HyperParams {
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub embed_dim: usize,
    pub loss_alpha: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub ntn_slices: usize,
    pub seed: u64,
    pub hidden: usize,
    pub mlp_width: usize,
    pub encoder: EncoderKind,
    /// Drop the actor loss entirely; `loss_alpha` is ignored.
    pub transition_only: bool,
    /// Fraction of trajectories used for training in the split.
    pub train_fraction: f64,
    /// Adam steps on the validation embeddings per epoch.
    pub val_embed_steps: usize,
    /// Retrain on all trajectories for the selected number of epochs.
    pub refit: bool,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            lr: 0.005,
            batch_size: 256,
            weight_decay: 1e-4,
            embed_dim: 4,
            loss_alpha: 0.3,
            max_epochs: 500,
            patience: 20,
            ntn_slices: 8,
            seed: 0,
            hidden: 32,
            mlp_width: 64,
            encoder: EncoderKind::Ntn,
            transition_only: false,
            train_fraction: 0.75,
            val_embed_steps: 5,
            refit: true,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("lr = {} must be finite and >= 0", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay must be >= 0"));
        }
        if self.max_epochs == 0 {
            return Err(Error::config("max_epochs must be >= 1"));
        }
        self.loss_config().validate()
    }

    pub fn loss_config(&self) -> LossConfig {
        if self.transition_only {
            LossConfig::transition_only()
        } else {
            LossConfig::joint(self.loss_alpha)
        }
    }

    pub fn arch(&self, data: &Dataset) -> Arch {
        let mut a = Arch::new(data.kind, self.encoder, data.n, data.t);
        a.embed_dim = self.embed_dim;
        a.slices = self.ntn_slices;
        a.hidden = self.hidden;
        a.mlp_width = self.mlp_width;
        a
    }
}

/// Cartesian grid over the search ranges, everything else from `base`:
/// lr {0.005, 0.001}, batch {2^8..2^12}, weight decay {0.01, 0.0001},
/// d {2, 4, 8}, alpha {0, 0.3, 0.5, 0.7}.
pub fn default_grid(base: &HyperParams) -> Vec<HyperParams> {
    let mut out = Vec::new();
    for lr in [0.005, 0.001] {
        for batch_size in [256, 512, 1024, 2048, 4096] {
            for weight_decay in [0.01, 0.0001] {
                for embed_dim in [2, 4, 8] {
                    for loss_alpha in [0.0, 0.3, 0.5, 0.7] {
                        out.push(HyperParams {
                            lr,
                            batch_size,
                            weight_decay,
                            embed_dim,
                            loss_alpha,
                            ..base.clone()
                        });
                    }
                }
            }
        }
    }
    out
}

/// Trajectory-level split: `floor(fraction * N)` training trajectories
/// chosen by a seeded shuffle, the rest for validation. Both sides are
/// returned sorted.
pub fn split(n: usize, t: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::config(format!("split fraction {fraction} outside (0, 1)")));
    }
    if n * t < 4 || n < 2 {
        return Err(Error::config("split needs N >= 2 trajectories and N*T >= 4 cells"));
    }
    let n_train = ((fraction * n as f64).floor() as usize).clamp(1, n - 1);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut Streams::new(seed).stream(Purpose::Split, 0));
    let mut train = idx[..n_train].to_vec();
    let mut val = idx[n_train..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub best_params: NtnParams,
    pub best_val_loss: f64,
    pub best_epoch: usize,
    pub curve: Vec<EpochStats>,
    pub chosen_hypers: HyperParams,
    pub n_updates: usize,
}

/// Adam with PyTorch-style L2 weight decay folded into the gradient.
struct Adam {
    m: NtnParams,
    v: NtnParams,
    step: i32,
    lr: f64,
    weight_decay: f64,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(params: &NtnParams, lr: f64, weight_decay: f64) -> Self {
        Self { m: params.zeros_like(), v: params.zeros_like(), step: 0, lr, weight_decay }
    }

    /// Updates `params`; `u` rows listed in `frozen_u` are left untouched.
    fn update(&mut self, params: &mut NtnParams, grad: &mut NtnParams, frozen_u: &[usize]) {
        self.step += 1;
        let c1 = 1.0 - Self::B1.powi(self.step);
        let c2 = 1.0 - Self::B2.powi(self.step);
        let wd = self.weight_decay;
        for ((_, g), (_, p)) in grad.blocks_mut().into_iter().zip(params.blocks()) {
            g.zip_apply(p, |g, p| *g += wd * p);
        }
        if let Some(gu) = grad.u_table.as_mut() {
            for &i in frozen_u {
                gu.row_mut(i).fill(0.0);
            }
        }
        let blocks = params.blocks_mut().into_iter().zip(grad.blocks()).zip(self.m.blocks_mut()).zip(self.v.blocks_mut());
        for ((((name, p), (_, g)), (_, m)), (_, v)) in blocks {
            let skip_rows: &[usize] = if name == "u_table" { frozen_u } else { &[] };
            for c in 0..p.ncols() {
                for r in 0..p.nrows() {
                    let gi = g[(r, c)];
                    m[(r, c)] = Self::B1 * m[(r, c)] + (1.0 - Self::B1) * gi;
                    v[(r, c)] = Self::B2 * v[(r, c)] + (1.0 - Self::B2) * gi * gi;
                    if !skip_rows.is_empty() && skip_rows.binary_search(&r).is_ok() {
                        continue;
                    }
                    let mh = m[(r, c)] / c1;
                    let vh = v[(r, c)] / c2;
                    p[(r, c)] -= self.lr * mh / (vh.sqrt() + Self::EPS);
                }
            }
        }
    }
}

fn cells_of(data: &Dataset, trajs: &[usize]) -> Vec<usize> {
    trajs.iter().flat_map(|&i| (0..data.t).map(move |t| i * data.t + t)).collect()
}

fn diverged(epoch: usize, detail: impl std::fmt::Display) -> Error {
    Error::Diverged { epoch, detail: detail.to_string() }
}

/// Runs training epochs over `train_cells`. Returns the per-epoch average
/// loss per cell and the number of parameter updates.
struct Trainer<'a> {
    data: &'a Dataset,
    hp: &'a HyperParams,
    cfg: LossConfig,
    streams: Streams,
    adam: Adam,
    n_updates: usize,
}

impl<'a> Trainer<'a> {
    fn new(data: &'a Dataset, hp: &'a HyperParams, params: &NtnParams, stream_seed: u64) -> Self {
        Self {
            data,
            hp,
            cfg: hp.loss_config(),
            streams: Streams::new(stream_seed),
            adam: Adam::new(params, hp.lr, hp.weight_decay),
            n_updates: 0,
        }
    }

    fn epoch(&mut self, params: &mut NtnParams, cells: &mut [usize], frozen_u: &[usize], epoch: usize) -> Result<f64> {
        cells.shuffle(&mut self.streams.stream(Purpose::Shuffle, epoch as u64));
        let mut total = 0.0;
        for chunk in cells.chunks(self.hp.batch_size) {
            let batch = Batch::from_cells(self.data, chunk, params);
            let (l, mut g) = loss_and_grad(&batch, params, &self.cfg).map_err(|e| diverged(epoch, e))?;
            total += l.total;
            let scale = 1.0 / chunk.len() as f64;
            for (_, m) in g.blocks_mut() {
                *m *= scale;
            }
            self.adam.update(params, &mut g, frozen_u);
            self.n_updates += 1;
            if !params.is_finite() {
                return Err(diverged(epoch, "non-finite parameters after update"));
            }
        }
        Ok(total / cells.len() as f64)
    }
}

/// Fits only the `u` rows of `trajs` on their cells, everything else frozen.
struct ValEmbedding {
    rows: Vec<usize>,
    cells: Vec<usize>,
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl ValEmbedding {
    fn new(data: &Dataset, trajs: &[usize], d: usize) -> Self {
        Self {
            rows: trajs.to_vec(),
            cells: cells_of(data, trajs),
            m: vec![0.0; trajs.len() * d],
            v: vec![0.0; trajs.len() * d],
            step: 0,
        }
    }

    fn fit(&mut self, data: &Dataset, params: &mut NtnParams, hp: &HyperParams, epoch: usize) -> Result<()> {
        if params.u_table.is_none() || hp.val_embed_steps == 0 {
            return Ok(());
        }
        let cfg = LossConfig::transition_only();
        let scale = 1.0 / self.cells.len() as f64;
        for _ in 0..hp.val_embed_steps {
            let batch = Batch::from_cells(data, &self.cells, params);
            let (_, g) = loss_and_grad(&batch, params, &cfg).map_err(|e| diverged(epoch, e))?;
            let gu = g.u_table.as_ref().expect("u gradient");
            let u = params.u_table.as_mut().expect("u table");
            self.step += 1;
            let c1 = 1.0 - Adam::B1.powi(self.step);
            let c2 = 1.0 - Adam::B2.powi(self.step);
            let d = u.ncols();
            for (k, &i) in self.rows.iter().enumerate() {
                for j in 0..d {
                    let gi = gu[(i, j)] * scale + hp.weight_decay * u[(i, j)];
                    let s = k * d + j;
                    self.m[s] = Adam::B1 * self.m[s] + (1.0 - Adam::B1) * gi;
                    self.v[s] = Adam::B2 * self.v[s] + (1.0 - Adam::B2) * gi * gi;
                    u[(i, j)] -= hp.lr * (self.m[s] / c1) / ((self.v[s] / c2).sqrt() + Adam::EPS);
                }
            }
        }
        Ok(())
    }

    fn loss(&self, data: &Dataset, params: &NtnParams, epoch: usize) -> Result<f64> {
        let batch = Batch::from_cells(data, &self.cells, params);
        let l = loss(&batch, params, &LossConfig::transition_only()).map_err(|e| diverged(epoch, e))?;
        Ok(l.l_transition / self.cells.len() as f64)
    }
}

/// Trains with early stopping on the validation split.
pub fn fit(data: &Dataset, hp: &HyperParams) -> Result<TrainReport> {
    hp.validate()?;
    data.validate()?;
    let streams = Streams::new(hp.seed);
    let (train_idx, val_idx) = split(data.n, data.t, hp.train_fraction, hp.seed)?;
    let arch = hp.arch(data);
    let mut params = NtnParams::init(arch, Normalization::from_dataset(data), &mut streams.stream(Purpose::ParamInit, 0))?;
    let mut trainer = Trainer::new(data, hp, &params, hp.seed);
    let mut train_cells = cells_of(data, &train_idx);
    let mut val = ValEmbedding::new(data, &val_idx, hp.embed_dim);
    let frozen_u = val_idx.clone();

    let mut curve = Vec::new();
    let mut best: Option<(f64, usize, NtnParams)> = None;
    for epoch in 0..hp.max_epochs {
        let train_loss = trainer.epoch(&mut params, &mut train_cells, &frozen_u, epoch)?;
        val.fit(data, &mut params, hp, epoch)?;
        let val_loss = val.loss(data, &params, epoch)?;
        if !train_loss.is_finite() || !val_loss.is_finite() {
            return Err(diverged(epoch, format!("train {train_loss}, val {val_loss}")));
        }
        curve.push(EpochStats { epoch, train_loss, val_loss });
        if best.as_ref().is_none_or(|(b, _, _)| val_loss < *b) {
            best = Some((val_loss, epoch, params.clone()));
        } else if epoch - best.as_ref().unwrap().1 >= hp.patience {
            break;
        }
    }
    let (best_val_loss, best_epoch, best_params) = best.expect("at least one epoch");
    Ok(TrainReport {
        best_params,
        best_val_loss,
        best_epoch,
        curve,
        chosen_hypers: hp.clone(),
        n_updates: trainer.n_updates,
    })
}

/// Trains on every trajectory for a fixed number of epochs.
pub fn fit_full(data: &Dataset, hp: &HyperParams, epochs: usize) -> Result<NtnParams> {
    hp.validate()?;
    data.validate()?;
    let streams = Streams::new(hp.seed);
    let mut params = NtnParams::init(hp.arch(data), Normalization::from_dataset(data), &mut streams.stream(Purpose::ParamInit, 1))?;
    let mut trainer = Trainer::new(data, hp, &params, hp.seed ^ 0x5eed_f00d);
    let mut cells: Vec<usize> = (0..data.n * data.t).collect();
    for epoch in 0..epochs.max(1) {
        trainer.epoch(&mut params, &mut cells, &[], epoch)?;
    }
    Ok(params)
}

/// Picks the cell with the smallest validation loss (first wins ties).
pub fn grid_search(data: &Dataset, grid: &[HyperParams]) -> Result<TrainReport> {
    if grid.is_empty() {
        return Err(Error::config("empty hyperparameter grid"));
    }
    let mut best: Option<TrainReport> = None;
    for hp in grid {
        match fit(data, hp) {
            Ok(r) => {
                if best.as_ref().is_none_or(|b| r.best_val_loss < b.best_val_loss) {
                    best = Some(r);
                }
            }
            Err(Error::Diverged { .. }) | Err(Error::NonFinite(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    best.ok_or(Error::AllCellsFailed)
}

/// Grid search, then (when `refit` is set on the winner) retraining on all
/// trajectories for the selected number of epochs. Returns the network to
/// use for evaluation along with the selection report.
pub fn train_model(data: &Dataset, grid: &[HyperParams]) -> Result<(NtnParams, TrainReport)> {
    let report = grid_search(data, grid)?;
    let params = if report.chosen_hypers.refit {
        fit_full(data, &report.chosen_hypers, report.best_epoch + 1)?
    } else {
        report.best_params.clone()
    };
    Ok((params, report))
}

pub const CURVE_HEADER: &str = "epoch,train_loss,val_loss";

pub fn write_curve(report: &TrainReport) -> String {
    use crate::env::io::fmt_f64;
    let mut s = format!("{CURVE_HEADER}\n");
    for e in &report.curve {
        let _ = writeln!(s, "{},{},{}", e.epoch, fmt_f64(e.train_loss), fmt_f64(e.val_loss));
    }
    s
}

/// `key = value` summary of a report, written next to its checkpoint.
pub fn write_report(report: &TrainReport) -> String {
    let h = &report.chosen_hypers;
    let mut s = String::new();
    let _ = writeln!(s, "best_val_loss = {:e}", report.best_val_loss);
    let _ = writeln!(s, "best_epoch = {}", report.best_epoch);
    let _ = writeln!(s, "epochs_run = {}", report.curve.len());
    let _ = writeln!(s, "n_updates = {}", report.n_updates);
    let _ = writeln!(s, "lr = {:e}", h.lr);
    let _ = writeln!(s, "batch_size = {}", h.batch_size);
    let _ = writeln!(s, "weight_decay = {:e}", h.weight_decay);
    let _ = writeln!(s, "embed_dim = {}", h.embed_dim);
    let _ = writeln!(s, "loss_alpha = {:e}", h.loss_alpha);
    let _ = writeln!(s, "transition_only = {}", h.transition_only);
    let _ = writeln!(s, "encoder = {}", h.encoder.tag());
    let _ = writeln!(s, "seed = {}", h.seed);
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{generate, EnvConfig, EnvKind, PolicySpec};

    fn tiny_hp() -> HyperParams {
        HyperParams {
            embed_dim: 2,
            ntn_slices: 3,
            hidden: 4,
            mlp_width: 6,
            batch_size: 16,
            max_epochs: 3,
            refit: false,
            ..HyperParams::default()
        }
    }

    fn tiny_data() -> Dataset {
        generate(&EnvConfig::new(EnvKind::DynamicProcess, 8, 2).with_horizon(5), &PolicySpec::Behavior)
            .unwrap()
            .0
    }

    #[test]
    fn split_rounding_and_determinism() {
        let (a, b) = split(100, 5, 0.75, 1).unwrap();
        assert_eq!((a.len(), b.len()), (75, 25));
        let (a, b) = split(4, 1, 0.75, 1).unwrap();
        assert_eq!((a.len(), b.len()), (3, 1));
        assert_eq!(split(10, 3, 0.75, 9).unwrap(), split(10, 3, 0.75, 9).unwrap());
        assert!(split(10, 3, 1.0, 9).is_err());
        assert!(split(10, 3, 0.0, 9).is_err());
        assert!(split(1, 10, 0.5, 9).is_err());
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let data = tiny_data();
        let hp = HyperParams { lr: 0.0, ..tiny_hp() };
        let r = fit(&data, &hp).unwrap();
        let init = NtnParams::init(
            hp.arch(&data),
            Normalization::from_dataset(&data),
            &mut Streams::new(hp.seed).stream(Purpose::ParamInit, 0),
        )
        .unwrap();
        assert_eq!(r.best_params, init);
        let v0 = r.curve[0].val_loss;
        assert!(r.curve.iter().all(|e| e.val_loss == v0));
        let t0 = r.curve[0].train_loss;
        assert!(r.curve.iter().all(|e| (e.train_loss - t0).abs() < 1e-12 * t0.abs().max(1.0)));
    }

    #[test]
    fn full_batch_is_one_update_per_epoch() {
        let data = tiny_data();
        let hp = HyperParams { batch_size: 10_000, patience: 100, ..tiny_hp() };
        let r = fit(&data, &hp).unwrap();
        assert_eq!(r.n_updates, r.curve.len());
        assert_eq!(r.curve.len(), hp.max_epochs);
    }

    #[test]
    fn best_val_loss_is_curve_minimum() {
        let data = tiny_data();
        let r = fit(&data, &HyperParams { max_epochs: 8, ..tiny_hp() }).unwrap();
        let min = r.curve.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min);
        assert_eq!(r.best_val_loss, min);
        assert_eq!(r.curve[r.best_epoch].val_loss, min);
    }

    #[test]
    fn deterministic_given_seed() {
        let data = tiny_data();
        assert_eq!(fit(&data, &tiny_hp()).unwrap(), fit(&data, &tiny_hp()).unwrap());
    }

    #[test]
    fn validation_embeddings_untouched_by_training_batches() {
        let data = tiny_data();
        let hp = HyperParams { val_embed_steps: 0, ..tiny_hp() };
        let r = fit(&data, &hp).unwrap();
        let init = NtnParams::init(
            hp.arch(&data),
            Normalization::from_dataset(&data),
            &mut Streams::new(hp.seed).stream(Purpose::ParamInit, 0),
        )
        .unwrap();
        let (train_idx, val_idx) = split(data.n, data.t, 0.75, hp.seed).unwrap();
        let (u, u0) = (r.best_params.u_table.unwrap(), init.u_table.unwrap());
        for i in val_idx {
            assert_eq!(u.row(i), u0.row(i));
        }
        assert!(train_idx.iter().any(|&i| u.row(i) != u0.row(i)));
    }

    #[test]
    fn grid_rules() {
        let data = tiny_data();
        let hp = tiny_hp();
        let single = grid_search(&data, std::slice::from_ref(&hp)).unwrap();
        assert_eq!(single, fit(&data, &hp).unwrap());
        let other = HyperParams { lr: 0.001, ..hp.clone() };
        let a = grid_search(&data, &[hp.clone(), other.clone()]).unwrap();
        let b = grid_search(&data, &[hp.clone(), other.clone(), hp.clone()]).unwrap();
        assert_eq!(a, b);
        assert!(grid_search(&data, &[]).is_err());
        let zero = HyperParams { lr: 0.0, ..hp.clone() };
        let w = grid_search(&data, &[zero, HyperParams { max_epochs: 10, ..hp }]).unwrap();
        assert!(w.chosen_hypers.lr > 0.0);
    }

    #[test]
    fn default_grid_size() {
        let g = default_grid(&HyperParams::default());
        assert_eq!(g.len(), 2 * 5 * 2 * 3 * 4);
    }
}
