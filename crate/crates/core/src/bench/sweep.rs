use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::Serialize;

use super::metrics::{mean_error, mean_memory_ratio, mean_recall};
use crate::attention::AttentionMode;
use crate::config::EngineConfig;
use crate::error::{Error, Result};
use crate::pipeline::{run, RunOptions};
use crate::scalar::Scalar;
use crate::trace::KvTrace;

/// Configuration field varied by a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    /// Token budget `B`.
    Budget,
    /// Tokens per centroid `r`.
    Ratio,
    /// Block size `W`; `alpha` follows as `W / 2`.
    BlockSize,
    /// Promotion fraction `p` (enables the hierarchy).
    Promote,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Budget => "budget",
            SweepAxis::Ratio => "r",
            SweepAxis::BlockSize => "W",
            SweepAxis::Promote => "p",
        }
    }

    fn apply(self, cfg: &mut EngineConfig, value: &str) -> Result<()> {
        match self {
            SweepAxis::Budget => cfg.set("token_budget", value),
            SweepAxis::Ratio => cfg.set("tokens_per_centroid", value),
            SweepAxis::BlockSize => {
                cfg.set("block_size", value)?;
                cfg.alpha = (cfg.block_size / 2).max(1);
                Ok(())
            }
            SweepAxis::Promote => cfg.set("promote_fraction", value),
        }
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "budget" | "B" => Ok(SweepAxis::Budget),
            "r" | "ratio" => Ok(SweepAxis::Ratio),
            "W" | "block_size" => Ok(SweepAxis::BlockSize),
            "p" | "promote_fraction" => Ok(SweepAxis::Promote),
            other => Err(Error::Config(format!("unknown sweep axis `{other}` (budget, r, W, p)"))),
        }
    }
}

/// One CSV row. Column order is fixed by field order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: String,
    pub mode: String,
    pub steps: usize,
    pub mean_error: f64,
    pub mean_recall: f64,
    pub memory_ratio: f64,
    pub updates: usize,
    /// Distance evaluations spent on cluster updates, per decode step.
    pub update_evals_per_step: f64,
}

/// Runs `trace` once per value with the oracle on.
pub fn sweep<T: Scalar>(
    trace: &KvTrace<T>,
    base: &EngineConfig,
    mode: AttentionMode,
    axis: SweepAxis,
    values: &[String],
) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    values
        .iter()
        .map(|v| {
            let mut cfg = base.clone();
            axis.apply(&mut cfg, v)?;
            cfg.validate()?;
            let reports = run(trace, &cfg, mode, RunOptions { oracle: true, audit: false })?;
            let evals: u64 = reports.iter().map(|r| r.update_distance_evals).sum();
            Ok(SweepRow {
                axis: axis.name().to_string(),
                value: v.trim().to_string(),
                mode: mode.name().to_string(),
                steps: reports.len(),
                mean_error: mean_error(&reports),
                mean_recall: mean_recall(&reports),
                memory_ratio: mean_memory_ratio(&reports),
                updates: reports.iter().filter(|r| r.update_occurred).count(),
                update_evals_per_step: evals as f64 / reports.len() as f64,
            })
        })
        .collect()
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
