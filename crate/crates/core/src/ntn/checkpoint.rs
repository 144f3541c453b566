//! Versioned text checkpoint.
//!
//! ```text
//! twode-ntn-checkpoint v1
//! env DynamicProcess
//! encoder ntn
//! embed_dim 4
//! ...
//! block enc_w 8 12
//! <row 0 values>
//! ...
//! end
//! ```
//!
//! Floats use the shortest representation that round-trips exactly.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;

use super::params::{Arch, EncoderKind, NtnParams, Normalization};
use crate::env::EnvKind;
use crate::{Error, Result};

const HEADER: &str = "twode-ntn-checkpoint v1";

fn join(v: impl IntoIterator<Item = f64>) -> String {
    v.into_iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(" ")
}

/// Serializes parameters to the checkpoint text format.
pub fn write_checkpoint(params: &NtnParams) -> String {
    let a = &params.arch;
    let n = &params.norm;
    let mut s = String::new();
    let _ = writeln!(s, "{HEADER}");
    let _ = writeln!(s, "env {}", a.env.name());
    let _ = writeln!(s, "encoder {}", a.encoder.tag());
    let _ = writeln!(s, "embed_dim {}", a.embed_dim);
    let _ = writeln!(s, "slices {}", a.slices);
    let _ = writeln!(s, "hidden {}", a.hidden);
    let _ = writeln!(s, "mlp_width {}", a.mlp_width);
    let _ = writeln!(s, "n_traj {}", a.n_traj);
    let _ = writeln!(s, "horizon {}", a.horizon);
    let _ = writeln!(s, "sigma_min {:e}", a.sigma_min);
    let _ = writeln!(s, "sigma_max {:e}", a.sigma_max);
    let _ = writeln!(s, "obs_mean {}", join(n.obs_mean.iter().copied()));
    let _ = writeln!(s, "obs_std {}", join(n.obs_std.iter().copied()));
    let _ = writeln!(s, "rew_mean {:e}", n.rew_mean);
    let _ = writeln!(s, "rew_std {:e}", n.rew_std);
    for (name, m) in params.blocks() {
        let _ = writeln!(s, "block {name} {} {}", m.nrows(), m.ncols());
        for r in 0..m.nrows() {
            let _ = writeln!(s, "{}", join(m.row(r).iter().copied()));
        }
    }
    s.push_str("end\n");
    s
}

pub fn save_checkpoint(params: &NtnParams, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, write_checkpoint(params))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<NtnParams> {
    parse_checkpoint(&std::fs::read_to_string(path)?)
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> Lines<'a> {
    fn next(&mut self) -> Result<(usize, &'a str)> {
        self.inner
            .next()
            .map(|(i, l)| (i + 1, l))
            .ok_or_else(|| Error::parse("checkpoint truncated"))
    }

    /// Next line of the form `key value...`; returns the value part.
    fn keyed(&mut self, key: &str) -> Result<&'a str> {
        let (n, line) = self.next()?;
        match line.split_once(' ') {
            Some((k, v)) if k == key => Ok(v),
            _ if line == key => Ok(""),
            _ => Err(Error::parse(format!("line {n}: expected `{key}`"))),
        }
    }

    fn usize(&mut self, key: &str) -> Result<usize> {
        let v = self.keyed(key)?;
        v.parse().map_err(|_| Error::parse(format!("bad integer for `{key}`: {v:?}")))
    }

    fn float(&mut self, key: &str) -> Result<f64> {
        let v = floats(self.keyed(key)?)?;
        match v.as_slice() {
            [x] => Ok(*x),
            _ => Err(Error::parse(format!("`{key}` needs exactly one value"))),
        }
    }
}

fn floats(s: &str) -> Result<Vec<f64>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(' ')
        .map(|t| {
            let x: f64 = t.parse().map_err(|_| Error::parse(format!("bad number {t:?}")))?;
            if x.is_finite() {
                Ok(x)
            } else {
                Err(Error::parse(format!("non-finite value {t:?}")))
            }
        })
        .collect()
}

/// Parses checkpoint text. Every dimension and block name is checked
/// against the architecture in the header.
pub fn parse_checkpoint(text: &str) -> Result<NtnParams> {
    let mut lines = Lines { inner: text.lines().enumerate() };
    let (_, first) = lines.next()?;
    if first != HEADER {
        return Err(Error::parse("not a v1 checkpoint"));
    }
    let env: EnvKind = lines.keyed("env")?.parse().map_err(|_| Error::parse("unknown env"))?;
    let encoder = EncoderKind::from_tag(lines.keyed("encoder")?)
        .ok_or_else(|| Error::parse("unknown encoder"))?;
    let mut arch = Arch::new(env, encoder, 1, 1);
    arch.embed_dim = lines.usize("embed_dim")?;
    arch.slices = lines.usize("slices")?;
    arch.hidden = lines.usize("hidden")?;
    arch.mlp_width = lines.usize("mlp_width")?;
    arch.n_traj = lines.usize("n_traj")?;
    arch.horizon = lines.usize("horizon")?;
    arch.sigma_min = lines.float("sigma_min")?;
    arch.sigma_max = lines.float("sigma_max")?;
    arch.validate().map_err(|e| Error::parse(e.to_string()))?;
    // Bound allocations before building zero blocks.
    let sizes = [arch.embed_dim, arch.slices, arch.hidden, arch.mlp_width, arch.n_traj, arch.horizon];
    if sizes.iter().any(|&s| s > 1 << 20)
        || arch.n_traj.saturating_mul(arch.embed_dim) > 1 << 26
        || arch.mlp_width.saturating_mul(arch.mlp_width) > 1 << 26
        || arch.slices.saturating_mul(arch.embed_dim.saturating_mul(arch.embed_dim)) > 1 << 26
        || arch.horizon.saturating_mul(arch.embed_dim) > 1 << 26
        || arch.hidden.saturating_mul(arch.slices.max(arch.mlp_width)) > 1 << 26
    {
        return Err(Error::parse("checkpoint dimensions too large"));
    }
    let d_o = arch.obs_dim();
    let norm = Normalization {
        obs_mean: floats(lines.keyed("obs_mean")?)?,
        obs_std: floats(lines.keyed("obs_std")?)?,
        rew_mean: lines.float("rew_mean")?,
        rew_std: lines.float("rew_std")?,
    };
    if norm.obs_mean.len() != d_o || norm.obs_std.len() != d_o {
        return Err(Error::parse("normalization length does not match observation dimension"));
    }
    if norm.obs_std.iter().chain([&norm.rew_std]).any(|&s| s <= 0.0) {
        return Err(Error::parse("normalization scales must be positive"));
    }
    let mut params = NtnParams::zeros(arch)?;
    params.norm = norm;
    for (name, m) in params.blocks_mut() {
        let (n, line) = lines.next()?;
        let expect = format!("block {name} {} {}", m.nrows(), m.ncols());
        if line != expect {
            return Err(Error::parse(format!("line {n}: expected `{expect}`, found `{line}`")));
        }
        let cols = m.ncols();
        let mut rows = Vec::with_capacity(m.nrows());
        for _ in 0..m.nrows() {
            let (n, line) = lines.next()?;
            let row = floats(line)?;
            if row.len() != cols {
                return Err(Error::parse(format!("line {n}: expected {cols} values")));
            }
            rows.extend(row);
        }
        *m = DMatrix::from_row_slice(m.nrows(), cols, &rows);
    }
    let (n, line) = lines.next()?;
    if line != "end" {
        return Err(Error::parse(format!("line {n}: expected `end`")));
    }
    if lines.inner.next().is_some() {
        return Err(Error::parse("trailing data after `end`"));
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Purpose, Streams};

    fn sample(enc: EncoderKind) -> NtnParams {
        let mut a = Arch::new(EnvKind::TumorGrowth, enc, 5, 3);
        a.embed_dim = 2;
        a.mlp_width = 6;
        let norm = Normalization {
            obs_mean: vec![0.1, -3.25],
            obs_std: vec![1.0 / 3.0, 7.0],
            rew_mean: std::f64::consts::PI,
            rew_std: 1e-7,
        };
        NtnParams::init(a, norm, &mut Streams::new(11).stream(Purpose::ParamInit, 0)).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        for enc in [EncoderKind::Ntn, EncoderKind::Mlp, EncoderKind::MlpNoU, EncoderKind::MlpNoW] {
            let p = sample(enc);
            let text = write_checkpoint(&p);
            let q = parse_checkpoint(&text).unwrap();
            assert_eq!(p, q);
            assert_eq!(text, write_checkpoint(&q));
        }
    }

    #[test]
    fn rejects_corruption() {
        let text = write_checkpoint(&sample(EncoderKind::Ntn));
        assert!(parse_checkpoint(&text.replace("v1", "v2")).is_err());
        assert!(parse_checkpoint(&text.replace("block f_w", "block f_x")).is_err());
        assert!(parse_checkpoint(&text[..text.len() - 4]).is_err());
        assert!(parse_checkpoint(&format!("{text}junk\n")).is_err());
        let bad_dim = text.replace("embed_dim 2", "embed_dim 3");
        assert!(parse_checkpoint(&bad_dim).is_err());
        assert!(parse_checkpoint("").is_err());
    }
}
