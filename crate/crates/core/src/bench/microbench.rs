use std::time::Instant;

use serde::Serialize;

use crate::attention::AttentionMode;
use crate::config::EngineConfig;
use crate::error::{Error, Result};
use crate::pipeline::{EngineState, RunOptions};
use crate::scalar::Scalar;
use crate::trace::KvTrace;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MicrobenchOptions {
    /// Leading decode steps run but not measured.
    pub warmup: usize,
    /// Measured decode steps.
    pub repeats: usize,
}

/// Per-step wall time of one stage, in seconds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageTiming {
    pub stage: String,
    pub median: f64,
    pub p95: f64,
    pub mean: f64,
    /// Mean stage time over mean step time.
    pub share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimingTable {
    pub samples: usize,
    pub updates: usize,
    /// Stages `lookup`, `exact`, `replacement`, `update`, then `step` for the
    /// whole step. The update stage is amortized: zero on steps without one.
    pub stages: Vec<StageTiming>,
    /// Wall time of the prompt clustering, in seconds.
    pub prefill_seconds: f64,
}

impl TimingTable {
    pub fn stage(&self, name: &str) -> Option<&StageTiming> {
        self.stages.iter().find(|s| s.stage == name)
    }

    /// Mean update time per step over the median step time.
    pub fn update_overhead(&self) -> f64 {
        let step = self.stage("step").map_or(f64::NAN, |s| s.median);
        self.stage("update").map_or(f64::NAN, |s| s.mean) / step
    }
}

/// Nearest-rank percentile of a sorted sample.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

fn summarize(stage: &str, mut xs: Vec<f64>, step_mean: f64) -> StageTiming {
    xs.sort_by(f64::total_cmp);
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    StageTiming {
        stage: stage.to_string(),
        median: percentile(&xs, 0.5),
        p95: percentile(&xs, 0.95),
        mean,
        share: if step_mean > 0.0 { mean / step_mean } else { 0.0 },
    }
}

/// Times the decode steps of `trace` stage by stage.
pub fn microbench<T: Scalar>(
    trace: &KvTrace<T>,
    cfg: &EngineConfig,
    mode: AttentionMode,
    opts: MicrobenchOptions,
) -> Result<TimingTable> {
    if opts.repeats == 0 {
        return Err(Error::Config("microbench needs at least one measured step".into()));
    }
    if trace.decode_steps() < opts.warmup + opts.repeats {
        return Err(Error::Config(format!(
            "trace has {} decode steps, microbench needs {}",
            trace.decode_steps(),
            opts.warmup + opts.repeats
        )));
    }
    let t = Instant::now();
    let mut state = EngineState::prefill(trace, cfg, mode)?;
    let prefill_seconds = t.elapsed().as_secs_f64();
    let mut stages: [Vec<f64>; 5] = Default::default();
    let mut updates = 0;
    for step in 0..opts.warmup + opts.repeats {
        let started = Instant::now();
        let (_, report) = state.step_trace(trace, step, RunOptions::default())?;
        let total = started.elapsed().as_secs_f64();
        if step < opts.warmup {
            continue;
        }
        updates += usize::from(report.update_occurred);
        let ts = report.times;
        for (slot, x) in stages
            .iter_mut()
            .zip([ts.lookup, ts.exact, ts.replacement, report.update_seconds, total])
        {
            slot.push(x);
        }
    }
    let step_mean = stages[4].iter().sum::<f64>() / stages[4].len() as f64;
    let names = ["lookup", "exact", "replacement", "update", "step"];
    Ok(TimingTable {
        samples: opts.repeats,
        updates,
        stages: names
            .iter()
            .zip(stages)
            .map(|(n, xs)| summarize(n, xs, step_mean))
            .collect(),
        prefill_seconds,
    })
}
