//! Prefill followed by step-by-step decoding over a recorded trace.

use std::time::Instant;

use serde::Serialize;

use crate::attention::{decode_step_attention, exact_weights, AttentionMode, HeadCache, HeadStep, StageTimes};
use crate::bench::{count_memops, MemOpCount};
use crate::clustering::{derive_seed, AuditReport, BlockLedger};
use crate::config::EngineConfig;
use crate::error::{Error, Result};
use crate::rope::{windowed_key_view, RopeParams};
use crate::scalar::{rel_error, Scalar};
use crate::trace::{HeadLayout, KvTrace};

/// Per-run switches that do not change the attention outputs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Compare every output against dense exact attention and record the
    /// oracle's top tokens for recall.
    pub oracle: bool,
    /// Audit every ledger after each cluster update.
    pub audit: bool,
}

/// One decode step as recorded in the JSON-lines report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecodeReport {
    pub step: usize,
    pub position: usize,
    pub mode: AttentionMode,
    /// Relative L2 error against the oracle, one per query head (oracle runs only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub errors: Option<Vec<f64>>,
    /// Clustered tokens attended exactly, one per kv-head.
    pub selected_tokens: Vec<usize>,
    pub memops: MemOpCount,
    pub update_occurred: bool,
    pub update_seconds: f64,
    /// Distance evaluations spent by the update, a deterministic cost measure.
    pub update_distance_evals: u64,
    pub times: StageTimes,
    pub heads: Vec<HeadStep>,
    /// Oracle top-B tokens of the clustered range, per kv-head.
    #[serde(skip)]
    pub oracle_topk: Option<Vec<Vec<usize>>>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub audit_violations: Vec<String>,
}

impl DecodeReport {
    pub fn mean_error(&self) -> Option<f64> {
        self.errors
            .as_ref()
            .map(|e| e.iter().sum::<f64>() / e.len().max(1) as f64)
    }
}

/// Serializes reports as JSON lines.
pub fn reports_to_jsonl(reports: &[DecodeReport]) -> Result<String> {
    let mut out = String::new();
    for r in reports {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

/// Everything the engine keeps between decode steps.
#[derive(Debug, Clone, PartialEq)]
pub struct EngineState<T> {
    cfg: EngineConfig,
    mode: AttentionMode,
    layout: HeadLayout,
    ledgers: Vec<BlockLedger<T>>,
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
    cursor: usize,
}

impl<T: Scalar> EngineState<T> {
    /// Copies the prompt of `trace` into the cache and clusters it.
    pub fn prefill(trace: &KvTrace<T>, cfg: &EngineConfig, mode: AttentionMode) -> Result<Self> {
        cfg.validate()?;
        let layout = trace.layout();
        let d = layout.head_dim;
        let n = trace.prompt_len();
        let mut keys = Vec::with_capacity(layout.num_kv_heads);
        let mut values = Vec::with_capacity(layout.num_kv_heads);
        let mut ledgers = Vec::with_capacity(layout.num_kv_heads);
        for h in 0..layout.num_kv_heads {
            let mut k = Vec::with_capacity(trace.seq_len() * d);
            k.extend_from_slice(&trace.head_keys(h)[..n * d]);
            let mut v = Vec::with_capacity(trace.seq_len() * d);
            v.extend_from_slice(&trace.head_values(h)[..n * d]);
            ledgers.push(match mode {
                AttentionMode::Multipole | AttentionMode::FlatNoReplacement => {
                    BlockLedger::prefill(h, windowed_key_view(&k), &v, d, n, cfg)?
                }
                // The oracle needs no clusters; pages keep the same bookkeeping cheaply.
                AttentionMode::PositionalBaseline | AttentionMode::Oracle => {
                    BlockLedger::paged(h, &k, &v, d, n, cfg)?
                }
            });
            keys.push(k);
            values.push(v);
        }
        Ok(Self {
            cfg: cfg.clone(),
            mode,
            layout,
            ledgers,
            keys,
            values,
            cursor: 0,
        })
    }

    pub fn cfg(&self) -> &EngineConfig {
        &self.cfg
    }

    pub fn mode(&self) -> AttentionMode {
        self.mode
    }

    pub fn ledgers(&self) -> &[BlockLedger<T>] {
        &self.ledgers
    }

    /// Decode steps taken so far.
    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn cache_len(&self) -> usize {
        self.keys[0].len() / self.layout.head_dim
    }

    pub fn head_keys(&self, kv_head: usize) -> &[T] {
        &self.keys[kv_head]
    }

    pub fn head_values(&self, kv_head: usize) -> &[T] {
        &self.values[kv_head]
    }

    /// Audits every semantic ledger against the cache.
    pub fn audit(&self) -> AuditReport {
        let mut report = AuditReport::default();
        if matches!(self.mode, AttentionMode::Multipole | AttentionMode::FlatNoReplacement) {
            for (h, l) in self.ledgers.iter().enumerate() {
                let r = l.audit(windowed_key_view(&self.keys[h]), &self.values[h], &self.cfg);
                report
                    .violations
                    .extend(r.violations.into_iter().map(|v| format!("head {h}: {v}")));
            }
        }
        report
    }

    /// Runs decode step `step` of `trace`, which must be the trace this engine was
    /// prefilled from.
    pub fn step_trace(
        &mut self,
        trace: &KvTrace<T>,
        step: usize,
        opts: RunOptions,
    ) -> Result<(Vec<Vec<f64>>, DecodeReport)> {
        let layout = trace.layout();
        let pos = trace.query_position(step);
        if pos != self.cache_len() {
            return Err(Error::Internal(format!(
                "step {step} of the trace is at position {pos}, the cache holds {}",
                self.cache_len()
            )));
        }
        let queries: Vec<&[T]> = (0..layout.num_q_heads).map(|h| trace.query(h, step)).collect();
        let keys: Vec<&[T]> = (0..layout.num_kv_heads).map(|h| trace.key(h, pos)).collect();
        let values: Vec<&[T]> = (0..layout.num_kv_heads).map(|h| trace.value(h, pos)).collect();
        self.step(&queries, &keys, &values, opts)
    }

    /// Attends with the current cache, then appends the new token of every kv-head.
    /// A cluster update runs whenever the buffer reaches `2L`.
    pub fn step(
        &mut self,
        queries: &[&[T]],
        new_keys: &[&[T]],
        new_values: &[&[T]],
        opts: RunOptions,
    ) -> Result<(Vec<Vec<f64>>, DecodeReport)> {
        let layout = self.layout;
        let d = layout.head_dim;
        if new_keys.len() != layout.num_kv_heads || new_values.len() != layout.num_kv_heads {
            return Err(Error::Internal("new token rows disagree with the layout".into()));
        }
        let position = self.cache_len();
        let caches: Vec<HeadCache<'_, T>> = (0..layout.num_kv_heads)
            .map(|h| HeadCache::new(&self.keys[h][..], &self.values[h][..]))
            .collect();
        let att = decode_step_attention(queries, position, &self.ledgers, &caches, layout, &self.cfg, self.mode)?;

        let (errors, oracle_topk) = if opts.oracle {
            let (e, t) = self.oracle_compare(queries, position, &att.outputs)?;
            (Some(e), Some(t))
        } else {
            (None, None)
        };

        for h in 0..layout.num_kv_heads {
            if new_keys[h].len() != d || new_values[h].len() != d {
                return Err(Error::validation("keys", "new token row has the wrong width"));
            }
            self.keys[h].extend_from_slice(new_keys[h]);
            self.values[h].extend_from_slice(new_values[h]);
            self.ledgers[h].push_token();
        }

        let mut update_occurred = false;
        let mut update_distance_evals = 0;
        let mut audit_violations = Vec::new();
        let t = Instant::now();
        for h in 0..layout.num_kv_heads {
            if !self.ledgers[h].needs_update(&self.cfg) {
                continue;
            }
            update_occurred = true;
            match self.mode {
                AttentionMode::Multipole | AttentionMode::FlatNoReplacement => {
                    let seed = derive_seed(self.cfg.seed, &[2, self.cursor as u64, h as u64]);
                    let stats = self.ledgers[h].append_tokens(
                        windowed_key_view(&self.keys[h]),
                        &self.values[h],
                        &self.cfg,
                        seed,
                    )?;
                    update_distance_evals += stats.distance_evals;
                }
                AttentionMode::PositionalBaseline | AttentionMode::Oracle => {
                    self.ledgers[h].append_pages(&self.keys[h], &self.values[h], &self.cfg)?;
                }
            }
        }
        let update_seconds = if update_occurred { t.elapsed().as_secs_f64() } else { 0.0 };
        if update_occurred && opts.audit {
            audit_violations = self.audit().violations;
        }

        let memops = count_memops(&att.heads);
        let report = DecodeReport {
            step: self.cursor,
            position,
            mode: self.mode,
            errors,
            selected_tokens: att.heads.iter().map(|h| h.selected_tokens).collect(),
            memops,
            update_occurred,
            update_seconds,
            update_distance_evals,
            times: att.times,
            heads: att.heads,
            oracle_topk,
            audit_violations,
        };
        self.cursor += 1;
        Ok((att.outputs, report))
    }

    /// Relative errors per query head and the oracle's top-B clustered tokens per
    /// kv-head, ranked by exact weight averaged over the group.
    fn oracle_compare(
        &self,
        queries: &[&[T]],
        position: usize,
        outputs: &[Vec<f64>],
    ) -> Result<(Vec<f64>, Vec<Vec<usize>>)> {
        let layout = self.layout;
        let d = layout.head_dim;
        let n = self.cache_len();
        let rope = RopeParams::new(d, self.cfg.rope_theta, self.cfg.window_offset)?;
        let positions: Vec<usize> = (0..n).collect();
        let mut errors = vec![0.0; layout.num_q_heads];
        let mut topk = Vec::with_capacity(layout.num_kv_heads);
        for kv in 0..layout.num_kv_heads {
            let mut mean_w = vec![0.0f64; n];
            for qh in layout.q_heads_of(kv) {
                let w = exact_weights(queries[qh], position, &self.keys[kv], &positions, &rope)?;
                let mut reference = vec![0.0f64; d];
                for (i, wi) in w.iter().enumerate() {
                    for (r, v) in reference.iter_mut().zip(&self.values[kv][i * d..(i + 1) * d]) {
                        *r += wi * v.widen();
                    }
                }
                errors[qh] = if self.mode == AttentionMode::Oracle {
                    0.0
                } else {
                    rel_error(&outputs[qh], &reference)
                };
                for (m, wi) in mean_w.iter_mut().zip(&w) {
                    *m += wi;
                }
            }
            let mut clustered: Vec<usize> = self.ledgers[kv].clustered().collect();
            clustered.sort_by(|&a, &b| mean_w[b].total_cmp(&mean_w[a]).then(a.cmp(&b)));
            clustered.truncate(self.cfg.token_budget);
            clustered.sort_unstable();
            topk.push(clustered);
        }
        Ok((errors, topk))
    }
}

/// Prefill plus every decode step of `trace` under `mode`.
pub fn run<T: Scalar>(
    trace: &KvTrace<T>,
    cfg: &EngineConfig,
    mode: AttentionMode,
    opts: RunOptions,
) -> Result<Vec<DecodeReport>> {
    Ok(run_with_outputs(trace, cfg, mode, opts)?.1)
}

/// Like [`run`], also returning the outputs of every step (`[step][q_head]`).
#[allow(clippy::type_complexity)]
pub fn run_with_outputs<T: Scalar>(
    trace: &KvTrace<T>,
    cfg: &EngineConfig,
    mode: AttentionMode,
    opts: RunOptions,
) -> Result<(Vec<Vec<Vec<f64>>>, Vec<DecodeReport>)> {
    if trace.decode_steps() == 0 {
        return Err(Error::validation("decode_steps", "run needs at least one decode step"));
    }
    let mut state = EngineState::prefill(trace, cfg, mode)?;
    let mut outputs = Vec::with_capacity(trace.decode_steps());
    let mut reports = Vec::with_capacity(trace.decode_steps());
    for step in 0..trace.decode_steps() {
        let (out, report) = state.step_trace(trace, step, opts)?;
        outputs.push(out);
        reports.push(report);
    }
    Ok((outputs, reports))
}
