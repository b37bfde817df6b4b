use std::ops::Range;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::kmeans::{kmeans, nearest, Schedule};
use super::online::OnlineState;
use super::{
    build_hierarchy, clusters_from_assignment, derive_seed, mean_of, Block, Cluster, ClusterRef,
    Level,
};
use crate::config::EngineConfig;
use crate::error::{Error, Result};
use crate::rope::{windowed_key_view, WindowedKeys};
use crate::scalar::{sq_dist, Scalar};
use crate::trace::KvTrace;

/// Relative tolerance of the centroid-consistency audit.
const CENTROID_RTOL: f64 = 1e-5;

/// Cluster bookkeeping for one kv-head.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockLedger<T> {
    head: usize,
    dim: usize,
    sink_tokens: usize,
    sealed: Vec<Block<T>>,
    final_block: Block<T>,
    buffer: Range<usize>,
    updates: usize,
    /// Incremental refinement state of the final block, built on first use.
    online: Option<OnlineState<T>>,
}

/// Work done by one online update.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct UpdateStats {
    pub sampled_centroids: usize,
    pub refine_rounds: usize,
    pub converged: bool,
    pub sealed_blocks: usize,
    pub distance_evals: u64,
}

/// Outcome of [`BlockLedger::audit`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AuditReport {
    pub violations: Vec<String>,
}

impl AuditReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    fn fail(&mut self, msg: String) {
        // Keep reports readable when a broken ledger trips the same check everywhere.
        if self.violations.len() < 64 {
            self.violations.push(msg);
        }
    }
}

/// Builds one ledger per kv-head over the prompt of `trace`.
pub fn build_prefill_index<T: Scalar>(
    trace: &KvTrace<T>,
    cfg: &EngineConfig,
) -> Result<Vec<BlockLedger<T>>> {
    (0..trace.layout().num_kv_heads)
        .map(|h| {
            BlockLedger::prefill(
                h,
                windowed_key_view(trace.head_keys(h)),
                trace.head_values(h),
                trace.head_dim(),
                trace.prompt_len(),
                cfg,
            )
        })
        .collect()
}

/// Block spans `(start, end)` for `n` clustered tokens starting at `first`.
/// The final block keeps between `alpha` and `W + alpha` tokens once `n >= alpha`.
fn block_spans(first: usize, n: usize, cfg: &EngineConfig) -> (Vec<Range<usize>>, Range<usize>) {
    let (w, alpha) = (cfg.block_size, cfg.alpha);
    let sealed = if n >= w + alpha { (n - alpha) / w } else { 0 };
    let spans = (0..sealed)
        .map(|i| first + i * w..first + (i + 1) * w)
        .collect();
    (spans, first + sealed * w..first + n)
}

impl<T: Scalar> BlockLedger<T> {
    /// Clusters the prompt of one kv-head. `keys` and `values` hold at least
    /// `prompt_len` rows of width `dim`.
    pub fn prefill(
        head: usize,
        keys: WindowedKeys<'_, T>,
        values: &[T],
        dim: usize,
        prompt_len: usize,
        cfg: &EngineConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if prompt_len <= cfg.sink_tokens {
            return Err(Error::Config(format!(
                "prompt of {prompt_len} tokens leaves nothing after {} sink tokens",
                cfg.sink_tokens
            )));
        }
        if keys.len() < prompt_len * dim || values.len() < prompt_len * dim {
            return Err(Error::validation("keys", "shorter than the prompt"));
        }
        let after_sinks = prompt_len - cfg.sink_tokens;
        let buffered = cfg.local_buffer.min(after_sinks);
        let clustered = after_sinks - buffered;
        let (spans, final_span) = block_spans(cfg.sink_tokens, clustered, cfg);

        let mut ledger = Self {
            head,
            dim,
            sink_tokens: cfg.sink_tokens,
            sealed: Vec::with_capacity(spans.len()),
            final_block: Block::empty(final_span.start),
            buffer: final_span.end..prompt_len,
            updates: 0,
            online: None,
        };
        for span in spans {
            let block = ledger.cluster_block(span, keys, values, cfg);
            ledger.sealed.push(block);
        }
        if !final_span.is_empty() {
            ledger.final_block = ledger.cluster_block(final_span.clone(), keys, values, cfg);
        }
        let fb = &ledger.final_block;
        ledger.online = Some(OnlineState::from_clusters(fb.start, fb.len(), &fb.clusters, &keys, dim).0);
        Ok(ledger)
    }

    fn cluster_block(
        &self,
        span: Range<usize>,
        keys: WindowedKeys<'_, T>,
        values: &[T],
        cfg: &EngineConfig,
    ) -> Block<T> {
        let d = self.dim;
        let points = &keys[span.start * d..span.end * d];
        let k = span.len().div_ceil(cfg.fine_ratio());
        let seed = derive_seed(cfg.seed, &[self.head as u64, span.start as u64, 0]);
        let schedule = Schedule {
            iters: cfg.prefill_kmeans_iters,
            max_rounds: cfg.max_kmeans_rounds,
        };
        let out = kmeans(points, d, k, schedule, seed);
        let mut block = Block {
            start: span.start,
            end: span.end,
            clusters: clusters_from_assignment(span.start, &out.assignments, &out.centroids, values, d),
            level1: None,
        };
        self.attach_hierarchy(&mut block, cfg);
        block
    }

    fn attach_hierarchy(&self, block: &mut Block<T>, cfg: &EngineConfig) {
        block.level1 = cfg.hierarchy.as_ref().map(|h| {
            let seed = derive_seed(
                cfg.seed,
                &[self.head as u64, block.start as u64, block.end as u64, 1],
            );
            build_hierarchy(&block.clusters, block.len(), h, cfg, seed)
        });
    }

    pub fn head(&self) -> usize {
        self.head
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn sink_tokens(&self) -> usize {
        self.sink_tokens
    }

    pub fn sealed_blocks(&self) -> &[Block<T>] {
        &self.sealed
    }

    pub fn final_block(&self) -> &Block<T> {
        &self.final_block
    }

    /// Sealed blocks followed by the final block (when it holds tokens).
    pub fn blocks(&self) -> impl Iterator<Item = &Block<T>> + '_ {
        self.sealed
            .iter()
            .chain(std::iter::once(&self.final_block).filter(|b| !b.is_empty()))
    }

    pub fn num_blocks(&self) -> usize {
        self.sealed.len() + usize::from(!self.final_block.is_empty())
    }

    pub fn block(&self, id: usize) -> &Block<T> {
        if id < self.sealed.len() {
            &self.sealed[id]
        } else {
            &self.final_block
        }
    }

    pub fn cluster(&self, r: ClusterRef) -> &Cluster<T> {
        let block = self.block(r.block);
        match r.level {
            Level::Fine => &block.clusters[r.cluster],
            Level::Coarse => &block
                .level1
                .as_ref()
                .expect("coarse reference into a ledger without hierarchy")[r.cluster],
        }
    }

    /// Every fine cluster, ordered by (block, cluster).
    pub fn fine_refs(&self) -> Vec<ClusterRef> {
        self.refs(Level::Fine)
    }

    pub fn coarse_refs(&self) -> Vec<ClusterRef> {
        self.refs(Level::Coarse)
    }

    fn refs(&self, level: Level) -> Vec<ClusterRef> {
        let mut out = Vec::new();
        for (b, block) in self.blocks().enumerate() {
            let n = match level {
                Level::Fine => block.clusters.len(),
                Level::Coarse => block.level1.as_ref().map_or(0, Vec::len),
            };
            out.extend((0..n).map(|cluster| ClusterRef {
                block: b,
                cluster,
                level,
            }));
        }
        out
    }

    pub fn has_hierarchy(&self) -> bool {
        self.blocks().all(|b| b.level1.is_some()) && self.num_blocks() > 0
    }

    /// Unclustered trailing tokens.
    pub fn buffer(&self) -> Range<usize> {
        self.buffer.clone()
    }

    /// Tokens held by clustered blocks.
    pub fn clustered(&self) -> Range<usize> {
        self.sink_tokens..self.buffer.start
    }

    /// Tokens covered by the ledger, sinks and buffer included.
    pub fn total_tokens(&self) -> usize {
        self.buffer.end
    }

    pub fn updates(&self) -> usize {
        self.updates
    }

    /// Registers a token appended to the cache; it joins the local buffer.
    pub fn push_token(&mut self) {
        self.buffer.end += 1;
    }

    pub fn needs_update(&self, cfg: &EngineConfig) -> bool {
        self.buffer.len() >= 2 * cfg.local_buffer
    }

    /// Moves the oldest `L` buffered tokens into the final block and refreshes its
    /// clusters: sampled seeds, single-shot assignment with running means, then
    /// Lloyd refinement over the whole final block. Splits the final block once it
    /// reaches `W + alpha` tokens.
    pub fn append_tokens(
        &mut self,
        keys: WindowedKeys<'_, T>,
        values: &[T],
        cfg: &EngineConfig,
        seed: u64,
    ) -> Result<UpdateStats> {
        let l = cfg.local_buffer;
        let d = self.dim;
        if self.buffer.len() < 2 * l {
            return Err(Error::Internal(format!(
                "buffer underflow: {} tokens buffered, update needs {}",
                self.buffer.len(),
                2 * l
            )));
        }
        if keys.len() < self.buffer.end * d || values.len() < self.buffer.end * d {
            return Err(Error::Internal("cache shorter than the ledger".into()));
        }
        let appended = self.buffer.start..self.buffer.start + l;
        let mut stats = UpdateStats::default();
        let mut state = match self.online.take() {
            Some(state) => state,
            None => {
                let fb = &self.final_block;
                let (state, evals) = OnlineState::from_clusters(fb.start, fb.len(), &fb.clusters, &keys, d);
                stats.distance_evals += evals;
                state
            }
        };
        self.buffer.start = appended.end;

        // Sampled seeds from the appended tokens.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples = l.div_ceil(cfg.fine_ratio()).min(l);
        stats.sampled_centroids = samples;
        let sampled: Vec<usize> = index::sample(&mut rng, l, samples)
            .into_iter()
            .map(|i| appended.start + i)
            .collect();

        // Single-shot assignment, then refinement over the entire final block.
        let cap = cfg.refine_kmeans_iters.max(cfg.max_kmeans_rounds);
        let out = state.append(&keys, appended.clone(), &sampled, cap);
        stats.refine_rounds = out.rounds;
        stats.converged = out.converged;
        stats.distance_evals += out.distance_evals;

        // Seal the first W tokens whenever the final block reaches W + alpha.
        while state.rows() >= cfg.block_size + cfg.alpha {
            let start = state.start();
            let (clusters, out) = state.split(&keys, values, cfg.block_size, cfg.max_kmeans_rounds);
            stats.distance_evals += out.distance_evals;
            stats.converged &= out.converged;
            let mut sealed = Block {
                start,
                end: start + cfg.block_size,
                clusters,
                level1: None,
            };
            self.attach_hierarchy(&mut sealed, cfg);
            self.sealed.push(sealed);
            stats.sealed_blocks += 1;
        }
        let mut fb = Block {
            start: state.start(),
            end: appended.end,
            clusters: state.clusters(0..state.rows(), values),
            level1: None,
        };
        self.attach_hierarchy(&mut fb, cfg);
        self.final_block = fb;
        self.online = Some(state);
        self.updates += 1;
        Ok(stats)
    }

    /// Positional comparator: contiguous pages of `r` tokens with mean centroids in
    /// place of semantic clusters, all held in one block. Such a ledger is not
    /// expected to pass [`Self::audit`].
    pub fn paged(
        head: usize,
        keys: &[T],
        values: &[T],
        dim: usize,
        prompt_len: usize,
        cfg: &EngineConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if prompt_len <= cfg.sink_tokens {
            return Err(Error::Config(format!(
                "prompt of {prompt_len} tokens leaves nothing after {} sink tokens",
                cfg.sink_tokens
            )));
        }
        let after_sinks = prompt_len - cfg.sink_tokens;
        let clustered_end = prompt_len - cfg.local_buffer.min(after_sinks);
        let mut ledger = Self {
            head,
            dim,
            sink_tokens: cfg.sink_tokens,
            sealed: Vec::new(),
            final_block: Block::empty(cfg.sink_tokens),
            buffer: clustered_end..prompt_len,
            updates: 0,
            online: None,
        };
        ledger.add_pages(cfg.sink_tokens..clustered_end, keys, values, cfg);
        Ok(ledger)
    }

    /// Moves the oldest `L` buffered tokens into new pages.
    pub fn append_pages(&mut self, keys: &[T], values: &[T], cfg: &EngineConfig) -> Result<()> {
        let l = cfg.local_buffer;
        if self.buffer.len() < 2 * l {
            return Err(Error::Internal("buffer underflow while paging".into()));
        }
        let span = self.buffer.start..self.buffer.start + l;
        self.buffer.start = span.end;
        self.add_pages(span, keys, values, cfg);
        self.updates += 1;
        Ok(())
    }

    fn add_pages(&mut self, span: Range<usize>, keys: &[T], values: &[T], cfg: &EngineConfig) {
        let d = self.dim;
        let r = cfg.fine_ratio();
        let mut t = span.start;
        while t < span.end {
            let members: Vec<usize> = (t..(t + r).min(span.end)).collect();
            self.final_block.clusters.push(Cluster {
                key_centroid: mean_of(&members, keys, d),
                value_centroid: mean_of(&members, values, d),
                members,
                children: Vec::new(),
            });
            t += r;
        }
        self.final_block.end = span.end;
    }

    /// Checks every ledger invariant against the cache contents.
    pub fn audit(&self, keys: WindowedKeys<'_, T>, values: &[T], cfg: &EngineConfig) -> AuditReport {
        let mut report = AuditReport::default();
        let d = self.dim;
        let total = self.total_tokens();
        if keys.len() < total * d || values.len() < total * d {
            report.fail(format!("cache holds fewer than {total} tokens"));
            return report;
        }

        // Partition: sinks | sealed blocks | final block | buffer.
        let mut cursor = self.sink_tokens;
        for (i, b) in self.sealed.iter().enumerate() {
            if b.start != cursor {
                report.fail(format!("sealed block {i} starts at {} not {cursor}", b.start));
            }
            if b.len() != cfg.block_size {
                report.fail(format!("sealed block {i} spans {} tokens", b.len()));
            }
            cursor = b.end;
        }
        if self.final_block.start != cursor {
            report.fail(format!("final block starts at {} not {cursor}", self.final_block.start));
        }
        if self.final_block.end != self.buffer.start {
            report.fail("final block does not end where the buffer starts".into());
        }
        let clustered = self.clustered();
        let mut seen = vec![false; clustered.len()];
        for (b, block) in self.blocks().enumerate() {
            for (c, cluster) in block.clusters.iter().enumerate() {
                if cluster.members.is_empty() {
                    report.fail(format!("block {b} cluster {c} is empty"));
                }
                if cluster.members.windows(2).any(|w| w[0] >= w[1]) {
                    report.fail(format!("block {b} cluster {c} members are not sorted"));
                }
                for &t in &cluster.members {
                    if t < block.start || t >= block.end {
                        report.fail(format!("token {t} of block {b} lies outside its span"));
                    } else if std::mem::replace(&mut seen[t - clustered.start], true) {
                        report.fail(format!("token {t} belongs to more than one cluster"));
                    }
                }
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            report.fail(format!("token {} is in no cluster", clustered.start + missing));
        }

        // Centroid consistency, both levels.
        for (b, block) in self.blocks().enumerate() {
            let levels = std::iter::once((Level::Fine, &block.clusters))
                .chain(block.level1.iter().map(|l1| (Level::Coarse, l1)));
            for (level, clusters) in levels {
                for (c, cluster) in clusters.iter().enumerate() {
                    if cluster.members.is_empty() {
                        continue;
                    }
                    for (what, data, stored) in [
                        ("key", &*keys, &cluster.key_centroid),
                        ("value", values, &cluster.value_centroid),
                    ] {
                        let mean = mean_f64(&cluster.members, data, d);
                        let err: f64 = mean
                            .iter()
                            .zip(stored.iter())
                            .map(|(m, s)| (m - s.widen()).powi(2))
                            .sum::<f64>()
                            .sqrt();
                        let scale = mean.iter().map(|m| m * m).sum::<f64>().sqrt();
                        if err > CENTROID_RTOL * scale + 1e-12 {
                            report.fail(format!(
                                "{level:?} {what} centroid of block {b} cluster {c} is off by {err:e}"
                            ));
                        }
                    }
                }
            }
            if let Some(l1) = &block.level1 {
                let mut claimed = vec![false; block.clusters.len()];
                for (c, coarse) in l1.iter().enumerate() {
                    let mut members: Vec<usize> = Vec::new();
                    for &child in &coarse.children {
                        if child >= claimed.len() || std::mem::replace(&mut claimed[child], true) {
                            report.fail(format!("coarse cluster {c} of block {b} has a bad child"));
                            continue;
                        }
                        members.extend_from_slice(&block.clusters[child].members);
                    }
                    members.sort_unstable();
                    if members != coarse.members {
                        report.fail(format!("coarse cluster {c} of block {b} members differ from its children"));
                    }
                }
                if claimed.iter().any(|c| !c) {
                    report.fail(format!("block {b} has fine clusters outside every coarse cluster"));
                }
            }
        }

        // Nearest assignment within each block.
        for (b, block) in self.blocks().enumerate() {
            let centroids: Vec<T> = block
                .clusters
                .iter()
                .flat_map(|c| c.key_centroid.iter().copied())
                .collect();
            for (c, cluster) in block.clusters.iter().enumerate() {
                for &t in &cluster.members {
                    let (best, best_d) = nearest(&keys[t * d..(t + 1) * d], &centroids, d);
                    if best != c {
                        let own = sq_dist(&keys[t * d..(t + 1) * d], &cluster.key_centroid);
                        report.fail(format!(
                            "token {t} in block {b} cluster {c} (d2 {own:e}) is nearer cluster {best} (d2 {best_d:e})"
                        ));
                    }
                }
            }
        }

        // Final block and buffer sizes.
        if clustered.len() >= cfg.alpha {
            let n = self.final_block.len();
            if n < cfg.alpha || n > cfg.block_size + cfg.alpha {
                report.fail(format!(
                    "final block holds {n} tokens, outside [{}, {}]",
                    cfg.alpha,
                    cfg.block_size + cfg.alpha
                ));
            }
        }
        if self.buffer.len() >= 2 * cfg.local_buffer {
            report.fail(format!("buffer holds {} tokens, update overdue", self.buffer.len()));
        }
        if !clustered.is_empty() && self.buffer.len() < cfg.local_buffer {
            report.fail(format!("buffer holds only {} tokens", self.buffer.len()));
        }
        report
    }
}

fn mean_f64<T: Scalar>(tokens: &[usize], data: &[T], dim: usize) -> Vec<f64> {
    let mut acc = vec![0.0f64; dim];
    for &t in tokens {
        for (a, v) in acc.iter_mut().zip(&data[t * dim..(t + 1) * dim]) {
            *a += v.widen();
        }
    }
    acc.iter().map(|a| a / tokens.len() as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clustering::{block_wcss, wcss};
    use crate::trace::{gen_synthetic, HeadLayout, SyntheticSpec};
    use proptest::prelude::*;

    fn cfg_small() -> EngineConfig {
        EngineConfig {
            block_size: 64,
            alpha: 32,
            local_buffer: 8,
            sink_tokens: 4,
            tokens_per_centroid: 8,
            ..EngineConfig::default()
        }
    }

    fn trace(seq: usize, d: usize, seed: u64) -> KvTrace<f32> {
        let layout = HeadLayout::new(1, 1, d).unwrap();
        let mut spec = SyntheticSpec::new(6, seq, layout, seed);
        spec.noise_sigma = 0.3;
        gen_synthetic(&spec).unwrap()
    }

    fn ledger_for(t: &KvTrace<f32>, prompt: usize, cfg: &EngineConfig) -> BlockLedger<f32> {
        BlockLedger::prefill(
            0,
            windowed_key_view(t.head_keys(0)),
            t.head_values(0),
            t.head_dim(),
            prompt,
            cfg,
        )
        .unwrap()
    }

    #[test]
    fn spans_follow_the_sliding_window_rule() {
        let cfg = EngineConfig::default();
        // 20490-token prompt: 20352 clustered tokens after 10 sinks and 128 buffered.
        let (sealed, last) = block_spans(10, 20490 - 10 - 128, &cfg);
        assert_eq!(sealed, vec![10..8202]);
        assert_eq!(last, 8202..20362);
        // 32K prompt: three sealed blocks and a final block.
        let (sealed, last) = block_spans(10, 32768 - 10 - 128, &cfg);
        assert_eq!(sealed.len(), 3);
        assert_eq!(last.len(), 32630 - 3 * 8192);
        // Exactly W + alpha splits into W and alpha.
        let (sealed, last) = block_spans(0, 12288, &cfg);
        assert_eq!(sealed, vec![0..8192]);
        assert_eq!(last.len(), 4096);
        let (sealed, last) = block_spans(0, 12287, &cfg);
        assert!(sealed.is_empty());
        assert_eq!(last.len(), 12287);
    }

    #[test]
    fn short_prompt_has_no_sealed_blocks() {
        let cfg = cfg_small();
        let t = trace(cfg.sink_tokens + cfg.local_buffer + 5, 4, 1);
        let l = ledger_for(&t, t.prompt_len(), &cfg);
        assert!(l.sealed_blocks().is_empty());
        assert_eq!(l.final_block().len(), 5);
        assert_eq!(l.buffer().len(), cfg.local_buffer);
        assert!(l.audit(windowed_key_view(t.head_keys(0)), t.head_values(0), &cfg).is_ok());
    }

    #[test]
    fn prompt_of_sinks_plus_buffer_has_no_clusters() {
        let cfg = cfg_small();
        let t = trace(cfg.sink_tokens + cfg.local_buffer, 4, 1);
        let l = ledger_for(&t, t.prompt_len(), &cfg);
        assert_eq!(l.num_blocks(), 0);
        assert_eq!(l.buffer(), cfg.sink_tokens..t.prompt_len());
    }

    #[test]
    fn prompt_shorter_than_sinks_is_rejected() {
        let cfg = cfg_small();
        let t = trace(20, 4, 1);
        let err = BlockLedger::prefill(
            0,
            windowed_key_view(t.head_keys(0)),
            t.head_values(0),
            4,
            cfg.sink_tokens,
            &cfg,
        );
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn split_at_exact_threshold() {
        // W=8, alpha=4: a final block reaching 12 tokens seals 8 and keeps 4.
        let cfg = EngineConfig {
            block_size: 8,
            alpha: 4,
            local_buffer: 4,
            sink_tokens: 0,
            tokens_per_centroid: 2,
            ..EngineConfig::default()
        };
        let t = trace(64, 4, 5);
        // prompt 12: buffer 4, final block 8 tokens.
        let mut l = ledger_for(&t, 12, &cfg);
        assert_eq!(l.final_block().len(), 8);
        for _ in 0..4 {
            l.push_token();
        }
        let keys = windowed_key_view(t.head_keys(0));
        let stats = l.append_tokens(keys, t.head_values(0), &cfg, 11).unwrap();
        assert_eq!(stats.sealed_blocks, 1);
        assert_eq!(l.sealed_blocks()[0].start..l.sealed_blocks()[0].end, 0..8);
        assert_eq!(l.final_block().start..l.final_block().end, 8..12);
        assert_eq!(l.buffer(), 12..16);
        let audit = l.audit(keys, t.head_values(0), &cfg);
        assert!(audit.is_ok(), "{:?}", audit.violations);
    }

    #[test]
    fn duplicates_of_a_centroid_join_it() {
        // Sinks 0, L equal to the whole buffer: appended tokens are the copies.
        let cfg = EngineConfig {
            block_size: 64,
            alpha: 32,
            local_buffer: 8,
            sink_tokens: 0,
            tokens_per_centroid: 8,
            ..EngineConfig::default()
        };
        let d = 4;
        let base = trace(200, d, 8);
        let prompt = 48;
        let mut keys = base.head_keys(0)[..(prompt - cfg.local_buffer) * d].to_vec();
        let mut values = base.head_values(0)[..(prompt - cfg.local_buffer) * d].to_vec();
        // Cluster the first 40 tokens, then fill buffer and append with copies.
        let pre = {
            let mut k = keys.clone();
            let mut v = values.clone();
            k.extend(std::iter::repeat_n(0.0f32, cfg.local_buffer * d));
            v.extend(std::iter::repeat_n(0.0f32, cfg.local_buffer * d));
            BlockLedger::prefill(0, windowed_key_view(&k[..]), &v, d, prompt, &cfg).unwrap()
        };
        let target = pre.final_block().clusters[0].clone();
        for _ in 0..2 * cfg.local_buffer {
            keys.extend_from_slice(&target.key_centroid);
            values.extend_from_slice(&target.value_centroid);
        }
        let mut l = pre.clone();
        for _ in 0..cfg.local_buffer {
            l.push_token();
        }
        let view = windowed_key_view(&keys[..]);
        l.append_tokens(view, &values, &cfg, 3).unwrap();
        let c = &l.final_block().clusters[0];
        assert_eq!(c.key_centroid, target.key_centroid);
        assert_eq!(c.size(), target.size() + cfg.local_buffer);
    }

    #[test]
    fn underflow_is_an_internal_error() {
        let cfg = cfg_small();
        let t = trace(200, 4, 2);
        let mut l = ledger_for(&t, 100, &cfg);
        let err = l.append_tokens(windowed_key_view(t.head_keys(0)), t.head_values(0), &cfg, 0);
        assert!(matches!(err, Err(Error::Internal(_))));
    }

    #[test]
    fn wcss_hand_examples() {
        let cfg = EngineConfig {
            sink_tokens: 0,
            local_buffer: 1,
            tokens_per_centroid: 1,
            ..EngineConfig::default()
        };
        // Singletons everywhere give zero.
        let keys = [0.0f32, 0.0, 2.0, 0.0, 5.0, 1.0, 9.0, 9.0];
        let l = BlockLedger::prefill(0, windowed_key_view(&keys[..]), &keys, 2, 4, &cfg).unwrap();
        assert_eq!(wcss(&l, windowed_key_view(&keys[..])), 0.0);
        // k = 1 over {(0,0), (2,0)}: centroid (1,0), wcss 2.
        let cfg = EngineConfig {
            tokens_per_centroid: 2,
            ..cfg
        };
        let keys = [0.0f32, 0.0, 2.0, 0.0, 7.0, 7.0];
        let l = BlockLedger::prefill(0, windowed_key_view(&keys[..]), &keys, 2, 3, &cfg).unwrap();
        let b = l.final_block();
        assert_eq!(b.clusters.len(), 1);
        assert_eq!(b.clusters[0].key_centroid, vec![1.0, 0.0]);
        assert_eq!(block_wcss(b, windowed_key_view(&keys[..]), 2), 2.0);
    }

    #[test]
    fn prefill_is_deterministic() {
        let cfg = cfg_small();
        let t = trace(600, 8, 4);
        assert_eq!(ledger_for(&t, 600, &cfg), ledger_for(&t, 600, &cfg));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn prefill_then_updates_keep_every_invariant(
            prompt in 13usize..400,
            seed in 0u64..10_000,
            hierarchical in any::<bool>(),
        ) {
            let mut cfg = cfg_small();
            if hierarchical {
                cfg.set("r1", "16").unwrap();
                cfg.set("r2", "4").unwrap();
            }
            let t = trace(prompt + 200, 4, seed);
            let keys = windowed_key_view(t.head_keys(0));
            let vals = t.head_values(0);
            let mut l = ledger_for(&t, prompt, &cfg);
            let audit = l.audit(keys, vals, &cfg);
            prop_assert!(audit.is_ok(), "{:?}", audit.violations);
            for step in 0..200 {
                l.push_token();
                if l.needs_update(&cfg) {
                    l.append_tokens(keys, vals, &cfg, step as u64).unwrap();
                    let audit = l.audit(keys, vals, &cfg);
                    prop_assert!(audit.is_ok(), "step {}: {:?}", step, audit.violations);
                }
            }
            prop_assert_eq!(l.total_tokens(), prompt + 200);
        }
    }
}
