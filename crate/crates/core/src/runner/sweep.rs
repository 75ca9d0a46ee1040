use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::projection::ProjectionKind;

use super::config::RunConfig;
use super::train::run_train;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepKind {
    Rank,
    Frequency,
    Sampling,
}

impl SweepKind {
    pub fn name(self) -> &'static str {
        match self {
            SweepKind::Rank => "rank",
            SweepKind::Frequency => "frequency",
            SweepKind::Sampling => "sampling",
        }
    }

    /// Config key the sweep varies.
    pub fn key(self) -> &'static str {
        match self {
            SweepKind::Rank => "r",
            SweepKind::Frequency => "k_freq",
            SweepKind::Sampling => "method",
        }
    }

    /// Default grid around `base`.
    pub fn default_values(self, base: &RunConfig) -> Vec<String> {
        match self {
            SweepKind::Rank => [base.r / 2, base.r, base.r * 2]
                .iter()
                .filter(|&&r| r > 0)
                .map(|r| r.to_string())
                .collect(),
            SweepKind::Frequency => ["1", "10", "50", "200", "inf"].map(String::from).to_vec(),
            SweepKind::Sampling => [
                ProjectionKind::TopR,
                ProjectionKind::FrozenTopR,
                ProjectionKind::UniformR,
                ProjectionKind::UniformNR,
                ProjectionKind::MultNormR,
                ProjectionKind::MultNormNR,
                ProjectionKind::MultNorm2R,
                ProjectionKind::MultNorm2NR,
            ]
            .map(|k| k.name().to_string())
            .to_vec(),
        }
    }
}

impl FromStr for SweepKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rank" => Ok(SweepKind::Rank),
            "frequency" => Ok(SweepKind::Frequency),
            "sampling" => Ok(SweepKind::Sampling),
            other => Err(Error::Config(format!("unknown sweep {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub kind: String,
    pub value: String,
    pub seed: u64,
    pub final_loss: f64,
    /// Evaluation loss at the last logged step in the first half of the run.
    pub half_loss: f64,
}

/// Train once per `(value, seed)` pair.
pub fn run_sweep(base: &RunConfig, kind: SweepKind, values: &[String], seeds: &[u64]) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for value in values {
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.set(kind.key(), value)?;
            cfg.seed = seed;
            cfg.out = None;
            cfg.validate()?;
            let out = run_train(&cfg)?;
            let half = cfg.steps / 2;
            let half_loss = out
                .records
                .iter()
                .rfind(|r| r.step < half.max(1))
                .map_or(out.final_eval, |r| r.eval_loss);
            rows.push(SweepRow {
                kind: kind.name().into(),
                value: value.clone(),
                seed,
                final_loss: out.final_eval,
                half_loss,
            });
        }
    }
    Ok(rows)
}

/// Median final loss per value, in first-seen value order.
pub fn median_by_value(rows: &[SweepRow]) -> Vec<(String, f64)> {
    let mut order: Vec<String> = Vec::new();
    for r in rows {
        if !order.contains(&r.value) {
            order.push(r.value.clone());
        }
    }
    order
        .into_iter()
        .map(|v| {
            let losses: Vec<f64> = rows.iter().filter(|r| r.value == v).map(|r| r.final_loss).collect();
            (v, median(&losses))
        })
        .collect()
}

/// Rank pairs `(low, high)` where the lower rank run to the full budget beats
/// the higher rank stopped at half the budget (median over seeds).
pub fn rank_tradeoffs(rows: &[SweepRow]) -> Vec<(String, String)> {
    let stat = |v: &str, half: bool| {
        let xs: Vec<f64> = rows
            .iter()
            .filter(|r| r.value == v)
            .map(|r| if half { r.half_loss } else { r.final_loss })
            .collect();
        median(&xs)
    };
    let mut ranks: Vec<(usize, String)> = median_by_value(rows)
        .into_iter()
        .filter_map(|(v, _)| v.parse().ok().map(|r| (r, v)))
        .collect();
    ranks.sort();
    let mut out = Vec::new();
    for (i, (_, lo)) in ranks.iter().enumerate() {
        for (_, hi) in &ranks[i + 1..] {
            if stat(lo, false) < stat(hi, true) {
                out.push((lo.clone(), hi.clone()));
            }
        }
    }
    out
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("kind,value,seed,final_loss,half_loss\n");
    for r in rows {
        writeln!(
            s,
            "{},{},{},{:.6},{:.6}",
            r.kind, r.value, r.seed, r.final_loss, r.half_loss
        )
        .unwrap();
    }
    s
}

pub fn sweep_table(rows: &[SweepRow]) -> String {
    let mut s = format!(
        "{:<10} {:>14} {:>6} {:>12} {:>12}\n",
        "kind", "value", "seed", "final_loss", "half_loss"
    );
    for r in rows {
        writeln!(
            s,
            "{:<10} {:>14} {:>6} {:>12.6} {:>12.6}",
            r.kind, r.value, r.seed, r.final_loss, r.half_loss
        )
        .unwrap();
    }
    s
}
