//! CSV files for datasets and latent tables.
//!
//! Dataset rows are `traj,t,o1..o_d,action[,action2],reward` with `traj`
//! 0-based and `t` 1-based. Each trajectory ends with a terminal row at
//! `t = T + 1` that carries the final observation and leaves the action and
//! reward fields empty. Floats use 17 significant digits.

use std::fmt::Write as _;

use super::{ActionSpace, Dataset, EnvKind, LatentTable, TumorPatient};
use crate::{Error, Result};

pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn kind_for(obs_dim: usize, action_cols: usize) -> Result<EnvKind> {
    match (obs_dim, action_cols) {
        (1, 1) => Ok(EnvKind::Linear),
        (4, 1) => Ok(EnvKind::DynamicProcess),
        (2, 2) => Ok(EnvKind::TumorGrowth),
        _ => Err(Error::parse(format!(
            "no env has {obs_dim} observation columns and {action_cols} action columns"
        ))),
    }
}

pub fn dataset_header(kind: EnvKind) -> String {
    let mut h = String::from("traj,t");
    for k in 1..=kind.obs_dim() {
        write!(h, ",o{k}").unwrap();
    }
    h.push_str(",action");
    if kind.action_space() == ActionSpace::TreatmentPair {
        h.push_str(",action2");
    }
    h.push_str(",reward");
    h
}

pub fn write_dataset(data: &Dataset) -> String {
    let space = data.action_space();
    let mut out = dataset_header(data.kind);
    out.push('\n');
    for i in 0..data.n {
        for t in 0..=data.t {
            write!(out, "{i},{}", t + 1).unwrap();
            let obs = if t < data.t { data.obs(i, t) } else { data.next_obs(i, t - 1) };
            for x in obs {
                write!(out, ",{}", fmt_f64(*x)).unwrap();
            }
            if t < data.t {
                for a in space.components(data.action(i, t)) {
                    write!(out, ",{a}").unwrap();
                }
                write!(out, ",{}", fmt_f64(data.reward(i, t))).unwrap();
            } else {
                for _ in 0..space.n_columns() {
                    out.push(',');
                }
                out.push(',');
            }
            out.push('\n');
        }
    }
    out
}

fn parse_f64(s: &str, what: &str, line: usize) -> Result<f64> {
    let x: f64 = s
        .trim()
        .parse()
        .map_err(|_| Error::parse(format!("line {line}: bad {what} `{s}`")))?;
    if !x.is_finite() {
        return Err(Error::parse(format!("line {line}: non-finite {what}")));
    }
    Ok(x)
}

fn parse_usize(s: &str, what: &str, line: usize) -> Result<usize> {
    s.trim()
        .parse()
        .map_err(|_| Error::parse(format!("line {line}: bad {what} `{s}`")))
}

fn reader(text: &str) -> csv::Reader<&[u8]> {
    csv::ReaderBuilder::new().has_headers(true).flexible(false).from_reader(text.as_bytes())
}

/// Parses a dataset CSV. Rows must appear in `(traj, t)` order.
pub fn read_dataset(text: &str) -> Result<Dataset> {
    let mut rdr = reader(text);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    if header.len() < 5 || header[0] != "traj" || header[1] != "t" || header.last().map(String::as_str) != Some("reward") {
        return Err(Error::parse("dataset header must be traj,t,o1..o_d,action[,action2],reward"));
    }
    let action_cols = if header[header.len() - 2] == "action2" { 2 } else { 1 };
    let obs_dim = header.len() - 3 - action_cols;
    for k in 0..obs_dim {
        if header[2 + k] != format!("o{}", k + 1) {
            return Err(Error::parse(format!("expected column o{}", k + 1)));
        }
    }
    if header[2 + obs_dim] != "action" {
        return Err(Error::parse("missing action column"));
    }
    let kind = kind_for(obs_dim, action_cols)?;
    let space = kind.action_space();

    let mut trajs: Vec<(Vec<f64>, Vec<usize>, Vec<f64>, Vec<f64>)> = Vec::new();
    for (row_no, rec) in rdr.records().enumerate() {
        let line = row_no + 2;
        let rec = rec?;
        let i = parse_usize(&rec[0], "traj", line)?;
        let t = parse_usize(&rec[1], "t", line)?;
        if i == trajs.len() && t == 1 {
            trajs.push(Default::default());
        }
        if i + 1 != trajs.len() {
            return Err(Error::parse(format!("line {line}: trajectories must be 0..N in order")));
        }
        let cur = trajs.last_mut().expect("pushed above");
        if !cur.3.is_empty() {
            return Err(Error::parse(format!("line {line}: row after terminal row")));
        }
        if t != cur.1.len() + 1 {
            return Err(Error::parse(format!("line {line}: expected t = {}", cur.1.len() + 1)));
        }
        let obs = (0..obs_dim)
            .map(|k| parse_f64(&rec[2 + k], "observation", line))
            .collect::<Result<Vec<f64>>>()?;
        let act_fields: Vec<&str> = (0..action_cols).map(|k| rec[2 + obs_dim + k].trim()).collect();
        let reward_field = rec[2 + obs_dim + action_cols].trim();
        if act_fields.iter().all(|s| s.is_empty()) && reward_field.is_empty() {
            if t == 1 {
                return Err(Error::parse(format!("line {line}: trajectory without steps")));
            }
            cur.3 = obs;
            continue;
        }
        let parts = act_fields
            .iter()
            .map(|s| s.parse::<u8>().map_err(|_| Error::parse(format!("line {line}: bad action `{s}`"))))
            .collect::<Result<Vec<u8>>>()?;
        let a = space
            .from_components(&parts)
            .ok_or_else(|| Error::parse(format!("line {line}: action outside action space")))?;
        cur.0.extend(obs);
        cur.1.push(a);
        cur.2.push(parse_f64(reward_field, "reward", line)?);
    }
    let n = trajs.len();
    if n == 0 {
        return Err(Error::parse("dataset has no rows"));
    }
    let horizon = trajs[0].1.len();
    let mut data = Dataset::empty(kind, n, horizon);
    data.observations.clear();
    data.actions.clear();
    data.rewards.clear();
    data.terminal_observations.clear();
    for (k, (obs, acts, rews, term)) in trajs.into_iter().enumerate() {
        if acts.len() != horizon || term.is_empty() {
            return Err(Error::parse(format!("trajectory {k} is incomplete or has a different horizon")));
        }
        data.observations.extend(obs);
        data.actions.extend(acts);
        data.rewards.extend(rews);
        data.terminal_observations.extend(term);
    }
    data.validate()?;
    Ok(data)
}

pub fn write_latent_u(l: &LatentTable) -> String {
    let mut out = String::from("traj,u\n");
    for (i, u) in l.u.iter().enumerate() {
        writeln!(out, "{i},{}", fmt_f64(*u)).unwrap();
    }
    out
}

pub fn write_latent_w(l: &LatentTable) -> String {
    let mut out = String::from("t,w\n");
    for (t, w) in l.w.iter().enumerate() {
        writeln!(out, "{},{}", t + 1, fmt_f64(*w)).unwrap();
    }
    out
}

pub fn write_patients(l: &LatentTable) -> String {
    let mut out = String::from("traj,group,rho,K,beta_c,alpha,beta\n");
    for (i, p) in l.patients.iter().enumerate() {
        writeln!(
            out,
            "{i},{},{},{},{},{},{}",
            p.group,
            fmt_f64(p.rho),
            fmt_f64(p.k),
            fmt_f64(p.beta_c),
            fmt_f64(p.alpha),
            fmt_f64(p.beta)
        )
        .unwrap();
    }
    out
}

fn read_indexed(text: &str, header: &[&str], first_index: usize) -> Result<Vec<Vec<String>>> {
    let mut rdr = reader(text);
    let h: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    if h != header {
        return Err(Error::parse(format!("expected header {}", header.join(","))));
    }
    let mut rows = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let idx = parse_usize(&rec[0], header[0], k + 2)?;
        if idx != k + first_index {
            return Err(Error::parse(format!("line {}: index out of order", k + 2)));
        }
        rows.push(rec.iter().skip(1).map(str::to_owned).collect());
    }
    Ok(rows)
}

/// Parses the `traj,u` and `t,w` files, plus the tumor patient file if given.
pub fn read_latents(u_text: &str, w_text: &str, patients_text: Option<&str>) -> Result<LatentTable> {
    let u = read_indexed(u_text, &["traj", "u"], 0)?
        .iter()
        .enumerate()
        .map(|(k, r)| parse_f64(&r[0], "u", k + 2))
        .collect::<Result<Vec<f64>>>()?;
    let w = read_indexed(w_text, &["t", "w"], 1)?
        .iter()
        .enumerate()
        .map(|(k, r)| parse_f64(&r[0], "w", k + 2))
        .collect::<Result<Vec<f64>>>()?;
    let patients = match patients_text {
        None => Vec::new(),
        Some(text) => read_indexed(text, &["traj", "group", "rho", "K", "beta_c", "alpha", "beta"], 0)?
            .iter()
            .enumerate()
            .map(|(k, r)| {
                let line = k + 2;
                let group: u8 = r[0]
                    .trim()
                    .parse()
                    .ok()
                    .filter(|g| (1..=3).contains(g))
                    .ok_or_else(|| Error::parse(format!("line {line}: group must be 1, 2 or 3")))?;
                Ok(TumorPatient {
                    group,
                    rho: parse_f64(&r[1], "rho", line)?,
                    k: parse_f64(&r[2], "K", line)?,
                    beta_c: parse_f64(&r[3], "beta_c", line)?,
                    alpha: parse_f64(&r[4], "alpha", line)?,
                    beta: parse_f64(&r[5], "beta", line)?,
                })
            })
            .collect::<Result<Vec<_>>>()?,
    };
    if !patients.is_empty() && patients.len() != u.len() {
        return Err(Error::parse("patient file and u file disagree on N"));
    }
    let n = u.len();
    Ok(LatentTable { u, w, patients, clamped: vec![false; n] })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{generate, EnvConfig, PolicySpec};
    use proptest::prelude::*;

    #[test]
    fn header_shapes() {
        assert_eq!(dataset_header(EnvKind::Linear), "traj,t,o1,action,reward");
        assert_eq!(dataset_header(EnvKind::TumorGrowth), "traj,t,o1,o2,action,action2,reward");
    }

    #[test]
    fn rejects_malformed_files() {
        assert!(read_dataset("").is_err());
        assert!(read_dataset("traj,t,o1,action,reward\n0,2,0.0,1,1.0\n").is_err());
        assert!(read_dataset("traj,t,o1,action,reward\n0,1,0.0,3,1.0\n0,2,0.0,,\n").is_err());
        assert!(read_dataset("traj,t,o1,action,reward\n0,1,NaN,1,1.0\n0,2,0.0,,\n").is_err());
        // missing terminal row
        assert!(read_dataset("traj,t,o1,action,reward\n0,1,0.0,1,1.0\n").is_err());
        assert!(read_dataset("traj,t,o1,o2,o3,action,reward\n").is_err());
    }

    #[test]
    fn latent_files_round_trip() {
        let cfg = EnvConfig::new(EnvKind::TumorGrowth, 4, 2).with_horizon(5);
        let (_, lat) = generate(&cfg, &PolicySpec::Behavior).unwrap();
        let back = read_latents(&write_latent_u(&lat), &write_latent_w(&lat), Some(&write_patients(&lat))).unwrap();
        assert_eq!(back.u, lat.u);
        assert_eq!(back.w, lat.w);
        assert_eq!(back.patients, lat.patients);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn dataset_csv_round_trips_bit_exactly(seed in 0u64..1000, k in 0usize..3, n in 1usize..4, t in 1usize..6) {
            let kind = [EnvKind::Linear, EnvKind::DynamicProcess, EnvKind::TumorGrowth][k];
            let cfg = EnvConfig::new(kind, n, seed).with_horizon(t);
            let (data, _) = generate(&cfg, &PolicySpec::Behavior).unwrap();
            let text = write_dataset(&data);
            let back = read_dataset(&text).unwrap();
            prop_assert_eq!(&back, &data);
            prop_assert_eq!(write_dataset(&back), text);
        }
    }
}
