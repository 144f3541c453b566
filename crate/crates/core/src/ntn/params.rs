use nalgebra::DMatrix;
use rand_distr::{Distribution, Normal, Uniform};

use crate::env::{Dataset, EnvKind};
use crate::rng::StreamRng;
use crate::{Error, Result};

/// Encoder producing the shared hidden vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EncoderKind {
    /// Bilinear tensor layer over `(u, w)` plus affine map of `[o; u; w]`.
    Ntn,
    /// Affine map of `[o; u; w]` only.
    Mlp,
    /// Affine map of `[o; w]`; no trajectory embeddings.
    MlpNoU,
    /// Affine map of `[o; u]`; no time embeddings.
    MlpNoW,
}

impl EncoderKind {
    pub fn uses_u(self) -> bool {
        !matches!(self, EncoderKind::MlpNoU)
    }

    pub fn uses_w(self) -> bool {
        !matches!(self, EncoderKind::MlpNoW)
    }

    pub fn bilinear(self) -> bool {
        matches!(self, EncoderKind::Ntn)
    }

    pub fn tag(self) -> &'static str {
        match self {
            EncoderKind::Ntn => "ntn",
            EncoderKind::Mlp => "mlp",
            EncoderKind::MlpNoU => "mlp-no-u",
            EncoderKind::MlpNoW => "mlp-no-w",
        }
    }

    pub fn from_tag(s: &str) -> Option<Self> {
        Some(match s {
            "ntn" => EncoderKind::Ntn,
            "mlp" => EncoderKind::Mlp,
            "mlp-no-u" => EncoderKind::MlpNoU,
            "mlp-no-w" => EncoderKind::MlpNoW,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Arch {
    pub env: EnvKind,
    pub encoder: EncoderKind,
    /// Embedding dimension `d`.
    pub embed_dim: usize,
    /// Number of tensor slices `k` (encoder pre-activation width).
    pub slices: usize,
    /// Output width of the post-activation affine layer.
    pub hidden: usize,
    pub mlp_width: usize,
    pub n_traj: usize,
    pub horizon: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
}

impl Arch {
    pub fn new(env: EnvKind, encoder: EncoderKind, n_traj: usize, horizon: usize) -> Self {
        Self {
            env,
            encoder,
            embed_dim: 4,
            slices: 8,
            hidden: 32,
            mlp_width: 64,
            n_traj,
            horizon,
            sigma_min: 1e-2,
            sigma_max: 10.0,
        }
    }

    pub fn obs_dim(&self) -> usize {
        self.env.obs_dim()
    }

    pub fn n_actions(&self) -> usize {
        self.env.action_space().n_actions()
    }

    /// Length of the Gaussian target `(r, o')`.
    pub fn target_dim(&self) -> usize {
        1 + self.obs_dim()
    }

    pub fn encoder_input_dim(&self) -> usize {
        let d = self.embed_dim;
        self.obs_dim()
            + if self.encoder.uses_u() { d } else { 0 }
            + if self.encoder.uses_w() { d } else { 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.slices == 0 || self.hidden == 0 || self.mlp_width == 0 {
            return Err(Error::config("network dimensions must be >= 1"));
        }
        if self.n_traj == 0 || self.horizon == 0 {
            return Err(Error::config("embedding tables need N >= 1 and T >= 1"));
        }
        if !(self.sigma_min > 0.0 && self.sigma_min < self.sigma_max) {
            return Err(Error::config("need 0 < sigma_min < sigma_max"));
        }
        Ok(())
    }
}

/// Affine standardization of observations and rewards.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub obs_mean: Vec<f64>,
    pub obs_std: Vec<f64>,
    pub rew_mean: f64,
    pub rew_std: f64,
}

impl Normalization {
    pub fn identity(obs_dim: usize) -> Self {
        Self { obs_mean: vec![0.0; obs_dim], obs_std: vec![1.0; obs_dim], rew_mean: 0.0, rew_std: 1.0 }
    }

    pub fn from_dataset(data: &Dataset) -> Self {
        let d = data.obs_dim;
        let cells = (data.n * data.t) as f64;
        let mut obs_mean = vec![0.0; d];
        for c in data.observations.chunks(d) {
            for k in 0..d {
                obs_mean[k] += c[k] / cells;
            }
        }
        let mut obs_var = vec![0.0; d];
        for c in data.observations.chunks(d) {
            for k in 0..d {
                obs_var[k] += (c[k] - obs_mean[k]).powi(2) / cells;
            }
        }
        let rew_mean = data.rewards.iter().sum::<f64>() / cells;
        let rew_var = data.rewards.iter().map(|r| (r - rew_mean).powi(2)).sum::<f64>() / cells;
        let guard = |v: f64| if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 };
        Self {
            obs_mean,
            obs_std: obs_var.into_iter().map(guard).collect(),
            rew_mean,
            rew_std: guard(rew_var),
        }
    }

    pub fn norm_obs(&self, obs: &[f64], out: &mut [f64]) {
        for k in 0..obs.len() {
            out[k] = (obs[k] - self.obs_mean[k]) / self.obs_std[k];
        }
    }

    pub fn denorm_obs(&self, obs: &[f64], out: &mut [f64]) {
        for k in 0..obs.len() {
            out[k] = obs[k] * self.obs_std[k] + self.obs_mean[k];
        }
    }

    pub fn norm_reward(&self, r: f64) -> f64 {
        (r - self.rew_mean) / self.rew_std
    }

    pub fn denorm_reward(&self, r: f64) -> f64 {
        r * self.rew_std + self.rew_mean
    }
}

/// All trainable parameters. Also used as the gradient container.
///
/// Weight matrices are `out x in`; biases are `out x 1`. The bilinear tensor
/// is stored as a `k x d^2` matrix whose row `m` is slice `W[m]` flattened
/// row-major, so `(u' W[m] w) = sum_ab W[m][a][b] u_a w_b` is row `m` times
/// `vec(u w')`.
#[derive(Debug, Clone, PartialEq)]
pub struct NtnParams {
    pub arch: Arch,
    pub norm: Normalization,
    pub bilinear: Option<DMatrix<f64>>,
    pub enc_w: DMatrix<f64>,
    pub enc_b: DMatrix<f64>,
    pub f_w: DMatrix<f64>,
    pub f_b: DMatrix<f64>,
    pub u_table: Option<DMatrix<f64>>,
    pub w_table: Option<DMatrix<f64>>,
    pub p_w1: DMatrix<f64>,
    pub p_b1: DMatrix<f64>,
    pub p_w2: DMatrix<f64>,
    pub p_b2: DMatrix<f64>,
    pub p_w3: DMatrix<f64>,
    pub p_b3: DMatrix<f64>,
    pub a_w1: DMatrix<f64>,
    pub a_b1: DMatrix<f64>,
    pub a_w2: DMatrix<f64>,
    pub a_b2: DMatrix<f64>,
    pub a_w3: DMatrix<f64>,
    pub a_b3: DMatrix<f64>,
}

impl NtnParams {
    /// All-zero parameters with identity normalization.
    pub fn zeros(arch: Arch) -> Result<Self> {
        arch.validate()?;
        let d = arch.embed_dim;
        let k = arch.slices;
        let h = arch.hidden;
        let wd = arch.mlp_width;
        let na = arch.n_actions();
        let dt = arch.target_dim();
        let z = DMatrix::<f64>::zeros;
        Ok(Self {
            norm: Normalization::identity(arch.obs_dim()),
            bilinear: arch.encoder.bilinear().then(|| z(k, d * d)),
            enc_w: z(k, arch.encoder_input_dim()),
            enc_b: z(k, 1),
            f_w: z(h, k),
            f_b: z(h, 1),
            u_table: arch.encoder.uses_u().then(|| z(arch.n_traj, d)),
            w_table: arch.encoder.uses_w().then(|| z(arch.horizon, d)),
            p_w1: z(wd, na + h),
            p_b1: z(wd, 1),
            p_w2: z(wd, wd),
            p_b2: z(wd, 1),
            p_w3: z(2 * dt, wd),
            p_b3: z(2 * dt, 1),
            a_w1: z(wd, h),
            a_b1: z(wd, 1),
            a_w2: z(wd, wd),
            a_b2: z(wd, 1),
            a_w3: z(na, wd),
            a_b3: z(na, 1),
            arch,
        })
    }

    /// Random initialization: embeddings `N(0, 0.1^2)`, weights uniform on
    /// `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, biases zero.
    pub fn init(arch: Arch, norm: Normalization, rng: &mut StreamRng) -> Result<Self> {
        let mut p = Self::zeros(arch)?;
        p.norm = norm;
        let emb = Normal::new(0.0, 0.1).expect("valid normal");
        for (name, m) in p.blocks_mut() {
            if name.ends_with("_table") {
                m.iter_mut().for_each(|x| *x = emb.sample(rng));
            } else if !name.contains("_b") {
                let bound = 1.0 / (m.ncols() as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound).expect("valid bounds");
                m.iter_mut().for_each(|x| *x = dist.sample(rng));
            }
        }
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, m) in z.blocks_mut() {
            m.fill(0.0);
        }
        z
    }

    pub fn blocks(&self) -> Vec<(&'static str, &DMatrix<f64>)> {
        let mut v: Vec<(&'static str, &DMatrix<f64>)> = Vec::with_capacity(19);
        if let Some(b) = &self.bilinear {
            v.push(("bilinear", b));
        }
        v.push(("enc_w", &self.enc_w));
        v.push(("enc_b", &self.enc_b));
        v.push(("f_w", &self.f_w));
        v.push(("f_b", &self.f_b));
        if let Some(u) = &self.u_table {
            v.push(("u_table", u));
        }
        if let Some(w) = &self.w_table {
            v.push(("w_table", w));
        }
        v.extend([
            ("p_w1", &self.p_w1),
            ("p_b1", &self.p_b1),
            ("p_w2", &self.p_w2),
            ("p_b2", &self.p_b2),
            ("p_w3", &self.p_w3),
            ("p_b3", &self.p_b3),
            ("a_w1", &self.a_w1),
            ("a_b1", &self.a_b1),
            ("a_w2", &self.a_w2),
            ("a_b2", &self.a_b2),
            ("a_w3", &self.a_w3),
            ("a_b3", &self.a_b3),
        ]);
        v
    }

    pub fn blocks_mut(&mut self) -> Vec<(&'static str, &mut DMatrix<f64>)> {
        let mut v: Vec<(&'static str, &mut DMatrix<f64>)> = Vec::with_capacity(19);
        if let Some(b) = &mut self.bilinear {
            v.push(("bilinear", b));
        }
        v.push(("enc_w", &mut self.enc_w));
        v.push(("enc_b", &mut self.enc_b));
        v.push(("f_w", &mut self.f_w));
        v.push(("f_b", &mut self.f_b));
        if let Some(u) = &mut self.u_table {
            v.push(("u_table", u));
        }
        if let Some(w) = &mut self.w_table {
            v.push(("w_table", w));
        }
        v.extend([
            ("p_w1", &mut self.p_w1),
            ("p_b1", &mut self.p_b1),
            ("p_w2", &mut self.p_w2),
            ("p_b2", &mut self.p_b2),
            ("p_w3", &mut self.p_w3),
            ("p_b3", &mut self.p_b3),
            ("a_w1", &mut self.a_w1),
            ("a_b1", &mut self.a_b1),
            ("a_w2", &mut self.a_w2),
            ("a_b2", &mut self.a_b2),
            ("a_w3", &mut self.a_w3),
            ("a_b3", &mut self.a_b3),
        ]);
        v
    }

    pub fn n_parameters(&self) -> usize {
        self.blocks().iter().map(|(_, m)| m.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|(_, m)| m.iter().all(|x| x.is_finite()))
    }

    /// Network of `self` with the embedding tables of `other`.
    ///
    /// Used by cross-fitting: latents estimated on one fold are evaluated
    /// under the transition network fitted on the other fold.
    pub fn with_embeddings_from(&self, other: &NtnParams) -> Result<NtnParams> {
        if self.arch.encoder != other.arch.encoder
            || self.arch.embed_dim != other.arch.embed_dim
            || self.arch.horizon != other.arch.horizon
        {
            return Err(Error::dim("embedding tables are incompatible with this network"));
        }
        let mut out = self.clone();
        out.u_table = other.u_table.clone();
        out.w_table = other.w_table.clone();
        out.arch.n_traj = other.arch.n_traj;
        Ok(out)
    }

    pub(crate) fn check_dims(&self) -> Result<()> {
        let a = &self.arch;
        let d = a.embed_dim;
        let shape_ok = |m: &DMatrix<f64>, r: usize, c: usize| m.nrows() == r && m.ncols() == c;
        let ok = shape_ok(&self.enc_w, a.slices, a.encoder_input_dim())
            && shape_ok(&self.enc_b, a.slices, 1)
            && shape_ok(&self.f_w, a.hidden, a.slices)
            && shape_ok(&self.f_b, a.hidden, 1)
            && self.bilinear.as_ref().map_or(!a.encoder.bilinear(), |b| shape_ok(b, a.slices, d * d))
            && self.u_table.as_ref().map_or(!a.encoder.uses_u(), |u| shape_ok(u, a.n_traj, d))
            && self.w_table.as_ref().map_or(!a.encoder.uses_w(), |w| shape_ok(w, a.horizon, d))
            && shape_ok(&self.p_w1, a.mlp_width, a.n_actions() + a.hidden)
            && shape_ok(&self.p_w3, 2 * a.target_dim(), a.mlp_width)
            && shape_ok(&self.a_w1, a.mlp_width, a.hidden)
            && shape_ok(&self.a_w3, a.n_actions(), a.mlp_width)
            && self.norm.obs_mean.len() == a.obs_dim()
            && self.norm.obs_std.len() == a.obs_dim();
        if ok {
            Ok(())
        } else {
            Err(Error::dim("parameter blocks inconsistent with architecture"))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Purpose, Streams};

    #[test]
    fn one_way_variants_drop_a_table() {
        let n = 7;
        let t = 5;
        let d = 3;
        let mk = |e| {
            let mut a = Arch::new(EnvKind::DynamicProcess, e, n, t);
            a.embed_dim = d;
            NtnParams::zeros(a).unwrap()
        };
        let mlp = mk(EncoderKind::Mlp);
        let no_u = mk(EncoderKind::MlpNoU);
        let no_w = mk(EncoderKind::MlpNoW);
        assert!(no_u.u_table.is_none() && no_u.w_table.is_some());
        assert!(no_w.w_table.is_none() && no_w.u_table.is_some());
        // Embedding tables differ by N*d and T*d; the encoder input loses d columns
        // times k slices.
        let k = mlp.arch.slices;
        assert_eq!(mlp.n_parameters() - no_u.n_parameters(), n * d + k * d);
        assert_eq!(mlp.n_parameters() - no_w.n_parameters(), t * d + k * d);
        assert!(no_u.blocks().iter().all(|(name, _)| *name != "u_table"));
    }

    #[test]
    fn init_is_deterministic_and_finite() {
        let arch = Arch::new(EnvKind::Linear, EncoderKind::Ntn, 3, 4);
        let s = Streams::new(3);
        let a = NtnParams::init(arch.clone(), Normalization::identity(1), &mut s.stream(Purpose::ParamInit, 0)).unwrap();
        let b = NtnParams::init(arch, Normalization::identity(1), &mut s.stream(Purpose::ParamInit, 0)).unwrap();
        assert_eq!(a, b);
        assert!(a.is_finite());
        a.check_dims().unwrap();
        assert!(a.enc_b.iter().all(|&x| x == 0.0));
        assert!(a.u_table.as_ref().unwrap().iter().any(|&x| x != 0.0));
    }
}
