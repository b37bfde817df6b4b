use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::exact::RotatedKeys;
use super::lookup::{flat_lookup, hierarchical_lookup, Lookup};
use super::partial::{merge_partials, AttentionPartial};
use crate::clustering::BlockLedger;
use crate::config::EngineConfig;
use crate::error::{Error, Result};
use crate::rope::{lookup_query_view, rotate, RopeParams};
use crate::scalar::Scalar;
use crate::trace::HeadLayout;

/// How a decode step attends to the clustered part of the cache.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionMode {
    /// Budgeted exact attention plus centroid replacement for the rest.
    Multipole,
    /// Same selection, rejected clusters dropped.
    FlatNoReplacement,
    /// Contiguous pages with mean centroids, rejected pages dropped.
    PositionalBaseline,
    /// Dense exact attention.
    Oracle,
}

impl AttentionMode {
    pub const ALL: [AttentionMode; 4] = [
        AttentionMode::Multipole,
        AttentionMode::FlatNoReplacement,
        AttentionMode::PositionalBaseline,
        AttentionMode::Oracle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttentionMode::Multipole => "multipole",
            AttentionMode::FlatNoReplacement => "flat-no-replacement",
            AttentionMode::PositionalBaseline => "positional-baseline",
            AttentionMode::Oracle => "oracle",
        }
    }

    fn replaces(self) -> bool {
        self == AttentionMode::Multipole
    }
}

impl fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttentionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown attention mode `{s}`")))
    }
}

/// Cache rows of one kv-head, indexed by token.
#[derive(Debug, Clone, Copy)]
pub struct HeadCache<'a, T> {
    pub keys: &'a [T],
    pub values: &'a [T],
    /// Rotary position of each row; the token index when absent.
    pub positions: Option<&'a [usize]>,
}

impl<'a, T> HeadCache<'a, T> {
    pub fn new(keys: &'a [T], values: &'a [T]) -> Self {
        Self {
            keys,
            values,
            positions: None,
        }
    }
}

/// What one kv-head group did during a step.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct HeadStep {
    pub kv_head: usize,
    pub cache_len: usize,
    pub sink_tokens: usize,
    pub buffer_tokens: usize,
    pub clustered_tokens: usize,
    pub selected_clusters: usize,
    pub rejected_clusters: usize,
    pub selected_tokens: usize,
    pub promoted: usize,
    pub key_centroid_loads: usize,
    pub value_centroid_loads: usize,
    /// Sorted tokens that received exact attention through selection.
    #[serde(skip)]
    pub selected_token_ids: Vec<usize>,
}

/// Wall time per stage, in seconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimes {
    pub lookup: f64,
    pub exact: f64,
    pub replacement: f64,
}

impl StageTimes {
    pub fn total(&self) -> f64 {
        self.lookup + self.exact + self.replacement
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepAttention {
    /// One output per query head.
    pub outputs: Vec<Vec<f64>>,
    pub heads: Vec<HeadStep>,
    pub times: StageTimes,
}

/// Attention for every query head at one decode step.
///
/// Sinks and the local buffer are always exact. The clustered range goes through
/// centroid lookup and budgeted selection according to `mode`; the oracle mode
/// attends densely to the whole cache.
pub fn decode_step_attention<T: Scalar>(
    queries: &[&[T]],
    q_pos: usize,
    ledgers: &[BlockLedger<T>],
    caches: &[HeadCache<'_, T>],
    layout: HeadLayout,
    cfg: &EngineConfig,
    mode: AttentionMode,
) -> Result<StepAttention> {
    let d = layout.head_dim;
    if queries.len() != layout.num_q_heads || ledgers.len() != layout.num_kv_heads || caches.len() != layout.num_kv_heads {
        return Err(Error::Internal("head counts disagree with the layout".into()));
    }
    let rope = RopeParams::new(d, cfg.rope_theta, cfg.window_offset)?;
    let hierarchical = cfg.hierarchy.is_some() && mode != AttentionMode::PositionalBaseline;
    let mut outputs = vec![Vec::new(); layout.num_q_heads];
    let mut heads = Vec::with_capacity(layout.num_kv_heads);
    let mut times = StageTimes::default();

    for (kv, (ledger, cache)) in ledgers.iter().zip(caches).enumerate() {
        let group = layout.q_heads_of(kv);
        let total = ledger.total_tokens();
        let clustered = ledger.clustered();
        let mut step = HeadStep {
            kv_head: kv,
            cache_len: total,
            sink_tokens: ledger.sink_tokens(),
            buffer_tokens: ledger.buffer().len(),
            clustered_tokens: clustered.len(),
            ..HeadStep::default()
        };

        let t0 = Instant::now();
        let lookup: Option<Lookup> = if mode == AttentionMode::Oracle {
            None
        } else {
            let lq: Vec<_> = group.clone().map(|h| lookup_query_view(queries[h], &rope)).collect();
            let lk = if hierarchical && ledger.num_blocks() > 0 {
                hierarchical_lookup(&lq, ledger, cfg)?
            } else {
                flat_lookup(&lq, ledger, cfg.token_budget)?
            };
            step.selected_clusters = lk.selected.len();
            step.rejected_clusters = lk.rejected.len();
            step.selected_tokens = lk.selected_tokens;
            step.promoted = lk.promoted;
            step.key_centroid_loads = lk.key_centroid_loads;
            step.value_centroid_loads = if mode.replaces() { lk.rejected.len() } else { 0 };
            step.selected_token_ids = lk.selected_token_ids(ledger);
            Some(lk)
        };
        times.lookup += t0.elapsed().as_secs_f64();

        let t1 = Instant::now();
        let tokens: Vec<usize> = match &lookup {
            None => {
                step.selected_token_ids = clustered.clone().collect();
                step.selected_tokens = clustered.len();
                (0..total).collect()
            }
            Some(_) => {
                let mut v: Vec<usize> = (0..ledger.sink_tokens().min(total)).collect();
                v.extend_from_slice(&step.selected_token_ids);
                v.extend(ledger.buffer());
                v
            }
        };
        let rotated = RotatedKeys::new(tokens, cache.keys, cache.positions, &rope);
        let exact: Vec<AttentionPartial> = group
            .clone()
            .map(|h| rotated.partial(&rotate(queries[h], q_pos, &rope), cache.values))
            .collect();
        times.exact += t1.elapsed().as_secs_f64();

        let t2 = Instant::now();
        for (i, (h, exact)) in group.zip(exact).enumerate() {
            let merged = match &lookup {
                Some(lk) if mode.replaces() && !lk.rejected.is_empty() => {
                    merge_partials(&[exact, lk.replacement_partial(i, ledger)])?
                }
                _ => exact,
            };
            outputs[h] = merged.finalize()?;
        }
        times.replacement += t2.elapsed().as_secs_f64();
        heads.push(step);
    }
    Ok(StepAttention {
        outputs,
        heads,
        times,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::exact_attention;
    use crate::clustering::build_prefill_index;
    use crate::config::HierarchyConfig;
    use crate::scalar::rel_error;
    use crate::trace::{gen_synthetic, KvTrace, SyntheticSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(seq: usize, group: usize, cfg: &EngineConfig, seed: u64) -> (KvTrace<f32>, Vec<BlockLedger<f32>>) {
        let layout = HeadLayout::new(2 * group, 2, 16).unwrap();
        let mut spec = SyntheticSpec::new(12, seq, layout, seed);
        spec.decode_steps = 1;
        let trace = gen_synthetic::<f32>(&spec).unwrap();
        let ledgers = build_prefill_index(&trace, cfg).unwrap();
        (trace, ledgers)
    }

    fn run_step(trace: &KvTrace<f32>, ledgers: &[BlockLedger<f32>], cfg: &EngineConfig, mode: AttentionMode) -> StepAttention {
        let layout = trace.layout();
        let qs: Vec<&[f32]> = (0..layout.num_q_heads).map(|h| trace.query(h, 0)).collect();
        let caches: Vec<_> = (0..layout.num_kv_heads)
            .map(|h| HeadCache::new(trace.head_keys(h), trace.head_values(h)))
            .collect();
        decode_step_attention(&qs, trace.query_position(0), ledgers, &caches, layout, cfg, mode).unwrap()
    }

    fn oracle(trace: &KvTrace<f32>, cfg: &EngineConfig, q_head: usize) -> Vec<f64> {
        let layout = trace.layout();
        let kv = layout.kv_head_of(q_head);
        let n = trace.prompt_len();
        let d = layout.head_dim;
        let rope = RopeParams::new(d, cfg.rope_theta, cfg.window_offset).unwrap();
        let positions: Vec<usize> = (0..n).collect();
        exact_attention(
            trace.query(q_head, 0),
            trace.query_position(0),
            &trace.head_keys(kv)[..n * d],
            &trace.head_values(kv)[..n * d],
            &positions,
            &rope,
        )
        .unwrap()
    }

    fn small_cfg() -> EngineConfig {
        EngineConfig {
            block_size: 128,
            alpha: 64,
            local_buffer: 16,
            sink_tokens: 4,
            token_budget: 32,
            ..EngineConfig::default()
        }
    }

    #[test]
    fn mode_names_round_trip() {
        for m in AttentionMode::ALL {
            assert_eq!(m.name().parse::<AttentionMode>().unwrap(), m);
        }
        assert!("dense".parse::<AttentionMode>().is_err());
    }

    #[test]
    fn full_budget_matches_oracle() {
        for hierarchy in [None, Some(HierarchyConfig::default())] {
            let cfg = EngineConfig {
                token_budget: 10_000,
                hierarchy,
                ..small_cfg()
            };
            let (trace, ledgers) = setup(600, 2, &cfg, 1);
            let out = run_step(&trace, &ledgers, &cfg, AttentionMode::Multipole);
            for h in 0..4 {
                assert!(rel_error(&out.outputs[h], &oracle(&trace, &cfg, h)) < 1e-5);
            }
            assert_eq!(out.heads[0].rejected_clusters, 0);
        }
    }

    #[test]
    fn oracle_mode_is_exact() {
        let cfg = small_cfg();
        let (trace, ledgers) = setup(400, 1, &cfg, 2);
        let out = run_step(&trace, &ledgers, &cfg, AttentionMode::Oracle);
        for h in 0..2 {
            assert!(rel_error(&out.outputs[h], &oracle(&trace, &cfg, h)) < 1e-12);
        }
    }

    #[test]
    fn singleton_clusters_without_offset_are_exact() {
        // Every key and the query sit at position 0 and the lookup offset is 0, so
        // replacing a singleton by its centroids reproduces the token's exact term.
        let d = 8;
        let n = 60;
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let keys: Vec<f32> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let values: Vec<f32> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let q: Vec<f32> = (0..d).map(|i| i as f32 * 0.3 - 1.0).collect();
        let zeros = vec![0usize; n];
        let layout = HeadLayout::new(1, 1, d).unwrap();
        let rope = RopeParams::new(d, 10000.0, 0).unwrap();
        let reference = exact_attention(&q, 0, &keys, &values, &zeros, &rope).unwrap();
        for budget in [0, 5, 17, 100] {
            let cfg = EngineConfig {
                tokens_per_centroid: 1,
                window_offset: 0,
                token_budget: budget,
                ..small_cfg()
            };
            let ledger = BlockLedger::prefill(0, crate::rope::windowed_key_view(&keys[..]), &values, d, n, &cfg).unwrap();
            assert!(ledger.blocks().all(|b| b.clusters.iter().all(|c| c.size() == 1)));
            let cache = HeadCache {
                positions: Some(&zeros),
                ..HeadCache::new(&keys[..], &values[..])
            };
            let out = decode_step_attention(&[&q[..]], 0, &[ledger], &[cache], layout, &cfg, AttentionMode::Multipole).unwrap();
            assert!(rel_error(&out.outputs[0], &reference) < 1e-5, "budget {budget}");
        }
    }

    #[test]
    fn all_ones_values_give_ones() {
        // The implied weights over exact tokens and weighted centroids sum to one.
        let cfg = small_cfg();
        let (trace, mut ledgers) = setup(700, 2, &cfg, 3);
        let layout = trace.layout();
        let ones = vec![1.0f32; trace.seq_len() * 16];
        ledgers = ledgers
            .into_iter()
            .map(|_| {
                BlockLedger::prefill(0, crate::rope::windowed_key_view(trace.head_keys(0)), &ones, 16, trace.prompt_len(), &cfg).unwrap()
            })
            .collect();
        let qs: Vec<&[f32]> = (0..layout.num_q_heads).map(|h| trace.query(h, 0)).collect();
        let caches = vec![HeadCache::new(trace.head_keys(0), &ones[..]); 2];
        for mode in [AttentionMode::Multipole, AttentionMode::FlatNoReplacement] {
            let out = decode_step_attention(&qs, trace.query_position(0), &ledgers, &caches, layout, &cfg, mode).unwrap();
            for o in &out.outputs {
                assert!(o.iter().all(|x| (x - 1.0).abs() < 1e-6));
            }
        }
    }

    #[test]
    fn replacement_only_changes_rejected_contributions() {
        let cfg = small_cfg();
        let (trace, ledgers) = setup(900, 2, &cfg, 4);
        let mp = run_step(&trace, &ledgers, &cfg, AttentionMode::Multipole);
        let flat = run_step(&trace, &ledgers, &cfg, AttentionMode::FlatNoReplacement);
        assert_eq!(mp.heads[0].selected_token_ids, flat.heads[0].selected_token_ids);
        assert!(mp.heads[0].value_centroid_loads > 0);
        assert_eq!(flat.heads[0].value_centroid_loads, 0);
        assert!(mp.heads[0].selected_tokens >= cfg.token_budget);
    }
}
