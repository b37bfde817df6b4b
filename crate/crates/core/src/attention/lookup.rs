use serde::Serialize;

use super::partial::AttentionPartial;
use crate::clustering::{BlockLedger, Cluster, ClusterRef};
use crate::config::EngineConfig;
use crate::error::{Error, Result};
use crate::rope::LookupQuery;
use crate::scalar::{dot_mixed, Scalar};

/// Estimated attention mass of one cluster.
///
/// `score` is the per-token weight estimate; the cluster as a whole carries
/// `score * size`. `logit` is the scaled dot product with the key centroid, kept
/// so replacement does not recompute it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClusterScore {
    pub cluster: ClusterRef,
    pub score: f64,
    pub size: usize,
    pub logit: f64,
}

/// Scores clusters against a lookup-view query. The softmax denominator spans
/// exactly the clusters passed in, each weighted by its size.
pub fn centroid_scores<T: Scalar>(
    q: &LookupQuery,
    clusters: &[(ClusterRef, &Cluster<T>)],
) -> Vec<ClusterScore> {
    let scale = 1.0 / (q.len() as f64).sqrt();
    let logits: Vec<f64> = clusters
        .iter()
        .map(|(_, c)| dot_mixed(q.as_slice(), &c.key_centroid) * scale)
        .collect();
    scores_from_logits(clusters.iter().map(|(r, c)| (*r, c.size())), &logits)
}

fn scores_from_logits(
    clusters: impl Iterator<Item = (ClusterRef, usize)>,
    logits: &[f64],
) -> Vec<ClusterScore> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let clusters: Vec<_> = clusters.collect();
    let denom: f64 = clusters
        .iter()
        .zip(logits)
        .map(|((_, n), z)| *n as f64 * (z - max).exp())
        .sum();
    clusters
        .into_iter()
        .zip(logits)
        .map(|((cluster, size), &logit)| ClusterScore {
            cluster,
            score: (logit - max).exp() / denom,
            size,
            logit,
        })
        .collect()
}

/// Averages the scores of the query heads sharing one kv-head. The result's
/// `logit` is the group mean too; replacement uses the per-head logits.
pub fn aggregate_gqa(per_head: &[Vec<ClusterScore>]) -> Result<Vec<ClusterScore>> {
    let first = per_head
        .first()
        .ok_or_else(|| Error::Internal("no query heads to aggregate".into()))?;
    let g = per_head.len() as f64;
    let mut out = first.clone();
    for other in &per_head[1..] {
        if other.len() != out.len() {
            return Err(Error::Internal("query heads scored different cluster sets".into()));
        }
        for (acc, s) in out.iter_mut().zip(other) {
            if acc.cluster != s.cluster || acc.size != s.size {
                return Err(Error::Internal(format!(
                    "query heads disagree on cluster {:?}",
                    acc.cluster
                )));
            }
            acc.score += s.score;
            acc.logit += s.logit;
        }
    }
    if per_head.len() > 1 {
        for s in &mut out {
            s.score /= g;
            s.logit /= g;
        }
    }
    Ok(out)
}

/// Result of [`select_clusters`]: ascending indices into the scored list.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Selection {
    pub selected: Vec<usize>,
    pub rejected: Vec<usize>,
    pub selected_tokens: usize,
}

impl Selection {
    pub fn selected_refs(&self, scores: &[ClusterScore]) -> Vec<ClusterRef> {
        self.selected.iter().map(|&i| scores[i].cluster).collect()
    }

    pub fn rejected_refs(&self, scores: &[ClusterScore]) -> Vec<ClusterRef> {
        self.rejected.iter().map(|&i| scores[i].cluster).collect()
    }
}

/// Greedy budgeted selection: highest score first (ties by block, then cluster),
/// taking clusters while fewer than `budget` tokens are held. The cluster that
/// crosses the budget is kept.
pub fn select_clusters(scores: &[ClusterScore], budget: usize) -> Selection {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .score
            .total_cmp(&scores[a].score)
            .then(scores[a].cluster.cmp(&scores[b].cluster))
    });
    let mut taken = vec![false; scores.len()];
    let mut held = 0usize;
    for i in order {
        if held >= budget {
            break;
        }
        taken[i] = true;
        held += scores[i].size;
    }
    let (selected, rejected): (Vec<usize>, Vec<usize>) = (0..scores.len()).partition(|&i| taken[i]);
    Selection {
        selected,
        rejected,
        selected_tokens: held,
    }
}

/// Approximates rejected clusters by their centroids: each contributes
/// `size · exp(logit)` times its value centroid, reusing the lookup logits.
pub fn centroid_replacement_partial<'a, T: Scalar>(
    dim: usize,
    rejected: impl IntoIterator<Item = (&'a ClusterScore, &'a Cluster<T>)>,
) -> AttentionPartial {
    AttentionPartial::from_terms(
        dim,
        rejected
            .into_iter()
            .map(|(s, c)| (s.logit, c.size() as f64, &c.value_centroid[..])),
    )
}

/// Clusters scored for one kv-head group and the budgeted split between exact
/// attention and centroid replacement.
#[derive(Debug, Clone, PartialEq)]
pub struct Lookup {
    /// Clusters in the final softmax denominator, ordered by reference. Flat lookup
    /// scores every fine cluster; hierarchical lookup scores the fine children of
    /// promoted coarse clusters plus the coarse clusters that were not promoted.
    pub candidates: Vec<ClusterRef>,
    /// Scores per query head of the group, aligned with `candidates`.
    pub per_head: Vec<Vec<ClusterScore>>,
    pub aggregated: Vec<ClusterScore>,
    /// Indices into `candidates`. Only fine clusters are ever selected.
    pub selected: Vec<usize>,
    pub rejected: Vec<usize>,
    pub selected_tokens: usize,
    /// Key centroids read while scoring.
    pub key_centroid_loads: usize,
    /// Coarse clusters promoted to fine-grained scoring (hierarchical lookup only).
    pub promoted: usize,
}

impl Lookup {
    pub fn selected_refs(&self) -> Vec<ClusterRef> {
        self.selected.iter().map(|&i| self.candidates[i]).collect()
    }

    /// Sorted token indices of every selected cluster.
    pub fn selected_token_ids<T: Scalar>(&self, ledger: &BlockLedger<T>) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .selected
            .iter()
            .flat_map(|&i| ledger.cluster(self.candidates[i]).members.iter().copied())
            .collect();
        out.sort_unstable();
        out
    }

    /// Replacement partial for query head `head` (index within the group).
    pub fn replacement_partial<T: Scalar>(&self, head: usize, ledger: &BlockLedger<T>) -> AttentionPartial {
        let scores = &self.per_head[head];
        centroid_replacement_partial(
            ledger.dim(),
            self.rejected
                .iter()
                .map(|&i| (&scores[i], ledger.cluster(self.candidates[i]))),
        )
    }
}

fn score_group<T: Scalar>(
    queries: &[LookupQuery],
    clusters: &[(ClusterRef, &Cluster<T>)],
) -> Result<(Vec<Vec<ClusterScore>>, Vec<ClusterScore>)> {
    let per_head: Vec<Vec<ClusterScore>> = queries.iter().map(|q| centroid_scores(q, clusters)).collect();
    let aggregated = aggregate_gqa(&per_head)?;
    Ok((per_head, aggregated))
}

/// Scores every fine cluster of the ledger and selects up to `budget` tokens.
pub fn flat_lookup<T: Scalar>(
    queries: &[LookupQuery],
    ledger: &BlockLedger<T>,
    budget: usize,
) -> Result<Lookup> {
    let candidates = ledger.fine_refs();
    let clusters: Vec<_> = candidates.iter().map(|&r| (r, ledger.cluster(r))).collect();
    let (per_head, aggregated) = score_group(queries, &clusters)?;
    let sel = select_clusters(&aggregated, budget);
    Ok(Lookup {
        key_centroid_loads: candidates.len(),
        candidates,
        per_head,
        aggregated,
        selected: sel.selected,
        rejected: sel.rejected,
        selected_tokens: sel.selected_tokens,
        promoted: 0,
    })
}

/// Two-level lookup: coarse clusters covering a fraction `p` of the clustered
/// tokens (and at least the token budget) are promoted, their fine children compete for the token budget, and the
/// remaining coarse clusters are approximated by their own centroids.
pub fn hierarchical_lookup<T: Scalar>(
    queries: &[LookupQuery],
    ledger: &BlockLedger<T>,
    cfg: &EngineConfig,
) -> Result<Lookup> {
    let h = cfg
        .hierarchy
        .as_ref()
        .ok_or_else(|| Error::Config("hierarchical lookup needs the hierarchy enabled".into()))?;
    if ledger.num_blocks() > 0 && !ledger.has_hierarchy() {
        return Err(Error::Config("ledger was built without coarse clusters".into()));
    }
    let coarse_refs = ledger.coarse_refs();
    let coarse: Vec<_> = coarse_refs.iter().map(|&r| (r, ledger.cluster(r))).collect();
    let (_, coarse_agg) = score_group(queries, &coarse)?;
    let total: usize = coarse_agg.iter().map(|s| s.size).sum();
    // Never promote less than the token budget could use.
    let promote_budget = ((h.promote_fraction * total as f64).ceil() as usize).max(cfg.token_budget);
    let promotion = select_clusters(&coarse_agg, promote_budget);

    let mut candidates: Vec<ClusterRef> = Vec::new();
    for &i in &promotion.selected {
        let r = coarse_refs[i];
        candidates.extend(ledger.cluster(r).children.iter().map(|&c| ClusterRef {
            block: r.block,
            cluster: c,
            level: crate::clustering::Level::Fine,
        }));
    }
    let promoted_fine = candidates.len();
    candidates.extend(promotion.rejected.iter().map(|&i| coarse_refs[i]));
    candidates.sort_unstable();

    let clusters: Vec<_> = candidates.iter().map(|&r| (r, ledger.cluster(r))).collect();
    let (per_head, aggregated) = score_group(queries, &clusters)?;

    // Only fine clusters compete for the budget; coarse candidates stay approximated.
    let fine_idx: Vec<usize> = (0..candidates.len())
        .filter(|&i| candidates[i].level == crate::clustering::Level::Fine)
        .collect();
    let fine_scores: Vec<ClusterScore> = fine_idx.iter().map(|&i| aggregated[i]).collect();
    let sel = select_clusters(&fine_scores, cfg.token_budget);
    let selected: Vec<usize> = sel.selected.iter().map(|&j| fine_idx[j]).collect();
    let mut taken = vec![false; candidates.len()];
    for &i in &selected {
        taken[i] = true;
    }
    let rejected = (0..candidates.len()).filter(|&i| !taken[i]).collect();

    Ok(Lookup {
        key_centroid_loads: coarse_refs.len() + promoted_fine,
        candidates,
        per_head,
        aggregated,
        selected,
        rejected,
        selected_tokens: sel.selected_tokens,
        promoted: promotion.selected.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clustering::Level;
    use crate::config::HierarchyConfig;
    use crate::rope::{lookup_query_view, windowed_key_view, RopeParams};
    use crate::trace::{gen_synthetic, HeadLayout, SyntheticSpec};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cref(block: usize, cluster: usize) -> ClusterRef {
        ClusterRef {
            block,
            cluster,
            level: Level::Fine,
        }
    }

    fn cluster(key: Vec<f64>, value: Vec<f64>, n: usize) -> Cluster<f64> {
        Cluster {
            key_centroid: key,
            value_centroid: value,
            members: (0..n).collect(),
            children: Vec::new(),
        }
    }

    fn score(s: f64, n: usize, c: usize) -> ClusterScore {
        ClusterScore {
            cluster: cref(0, c),
            score: s,
            size: n,
            logit: s.ln(),
        }
    }

    fn random_clusters(rng: &mut ChaCha8Rng, k: usize, d: usize) -> Vec<Cluster<f64>> {
        (0..k)
            .map(|_| {
                cluster(
                    (0..d).map(|_| rng.random_range(-2.0..2.0)).collect(),
                    (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    rng.random_range(1..40),
                )
            })
            .collect()
    }

    fn with_refs(cs: &[Cluster<f64>]) -> Vec<(ClusterRef, &Cluster<f64>)> {
        cs.iter().enumerate().map(|(i, c)| (cref(0, i), c)).collect()
    }

    #[test]
    fn single_cluster_scores_one_over_size() {
        let cs = [cluster(vec![0.3, 1.0], vec![0.0, 0.0], 7)];
        let s = centroid_scores(&LookupQuery::from_rotated(vec![2.0, -1.0]), &with_refs(&cs));
        assert!((s[0].score - 1.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn zero_query_scores_uniformly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cs = random_clusters(&mut rng, 6, 4);
        let total: usize = cs.iter().map(|c| c.size()).sum();
        for s in centroid_scores(&LookupQuery::from_rotated(vec![0.0; 4]), &with_refs(&cs)) {
            assert!((s.score - 1.0 / total as f64).abs() < 1e-15);
        }
    }

    #[test]
    fn scores_match_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let d = 8;
        let cs = random_clusters(&mut rng, 10, d);
        let q: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
        let got = centroid_scores(&LookupQuery::from_rotated(q.clone()), &with_refs(&cs));
        let e = |c: &Cluster<f64>| {
            let mut z = 0.0;
            for j in 0..d {
                z += q[j] * c.key_centroid[j];
            }
            (z / (d as f64).sqrt()).exp()
        };
        let denom: f64 = cs.iter().map(|c| c.size() as f64 * e(c)).sum();
        for (s, c) in got.iter().zip(&cs) {
            assert!((s.score - e(c) / denom).abs() < 1e-8);
        }
    }

    #[test]
    fn aggregation_averages() {
        let a = vec![score(0.2, 5, 0)];
        let b = vec![score(0.4, 5, 0)];
        assert_eq!(aggregate_gqa(&[a.clone()]).unwrap(), a);
        let m = aggregate_gqa(&[a, b]).unwrap();
        assert!((m[0].score - 0.3).abs() < 1e-15);
        assert_eq!(m[0].size, 5);
    }

    #[test]
    fn aggregation_rejects_mismatched_sets() {
        let a = vec![score(0.2, 5, 0)];
        let b = vec![score(0.2, 5, 1)];
        assert!(matches!(aggregate_gqa(&[a.clone(), b]), Err(Error::Internal(_))));
        assert!(aggregate_gqa(&[a, vec![]]).is_err());
    }

    #[test]
    fn aggregated_argmax_matches_mean_of_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = 8;
        let cs = random_clusters(&mut rng, 12, d);
        let heads: Vec<Vec<ClusterScore>> = (0..4)
            .map(|_| {
                let q = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
                centroid_scores(&LookupQuery::from_rotated(q), &with_refs(&cs))
            })
            .collect();
        let agg = aggregate_gqa(&heads).unwrap();
        let mut best = (0, f64::MIN);
        for i in 0..cs.len() {
            let mut sum = 0.0;
            for h in &heads {
                sum += h[i].score;
            }
            if sum / 4.0 > best.1 {
                best = (i, sum / 4.0);
            }
        }
        assert_eq!(select_clusters(&agg, 1).selected, vec![best.0]);
    }

    #[test]
    fn greedy_selection_keeps_the_crossing_cluster() {
        let scores = [score(0.5, 10, 0), score(0.3, 10, 1), score(0.2, 10, 2)];
        let sel = select_clusters(&scores, 15);
        assert_eq!(sel.selected, vec![0, 1]);
        assert_eq!(sel.rejected, vec![2]);
        assert_eq!(sel.selected_tokens, 20);
        assert!(select_clusters(&scores, 0).selected.is_empty());
        let all = select_clusters(&scores, 30);
        assert_eq!(all.selected.len(), 3);
        assert!(all.rejected.is_empty());
    }

    #[test]
    fn ties_break_by_block_then_cluster() {
        let mut scores = [score(0.25, 1, 3), score(0.25, 1, 1), score(0.25, 1, 2)];
        scores[0].cluster = cref(0, 3);
        scores[2].cluster = cref(1, 0);
        assert_eq!(select_clusters(&scores, 1).selected, vec![1]);
        assert_eq!(select_clusters(&scores, 2).selected, vec![0, 1]);
    }

    #[test]
    fn singleton_replacement_equals_the_token_term() {
        let c = cluster(vec![0.4, -0.2], vec![1.5, 2.5], 1);
        let q = LookupQuery::from_rotated(vec![1.0, 3.0]);
        let s = centroid_scores(&q, &with_refs(std::slice::from_ref(&c)));
        let p = centroid_replacement_partial(2, [(&s[0], &c)]);
        let token = AttentionPartial::from_terms(2, [((0.4 - 0.6) / 2f64.sqrt(), 1.0, &c.value_centroid[..])]);
        assert!((p.sum - token.sum).abs() < 1e-15);
        assert_eq!(p.finalize().unwrap(), token.finalize().unwrap());
    }

    #[test]
    fn zero_query_replacement_is_size_weighted_mean() {
        let cs = [
            cluster(vec![1.0, 0.0], vec![2.0, 0.0], 3),
            cluster(vec![0.0, 1.0], vec![0.0, 4.0], 1),
        ];
        let s = centroid_scores(&LookupQuery::from_rotated(vec![0.0, 0.0]), &with_refs(&cs));
        let p = centroid_replacement_partial(2, s.iter().zip(&cs));
        assert_eq!(p.acc, vec![6.0, 4.0]);
        assert_eq!(p.finalize().unwrap(), vec![1.5, 1.0]);
    }

    #[test]
    fn replacement_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let d = 6;
        let cs = random_clusters(&mut rng, 9, d);
        let q: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
        let s = centroid_scores(&LookupQuery::from_rotated(q.clone()), &with_refs(&cs));
        let out = centroid_replacement_partial(d, s.iter().zip(&cs)).finalize().unwrap();
        let mut num = vec![0.0; d];
        let mut den = 0.0;
        for c in &cs {
            let z: f64 = (0..d).map(|j| q[j] * c.key_centroid[j]).sum::<f64>() / (d as f64).sqrt();
            let w = c.size() as f64 * z.exp();
            den += w;
            for j in 0..d {
                num[j] += w * c.value_centroid[j];
            }
        }
        for j in 0..d {
            assert!((out[j] - num[j] / den).abs() < 1e-8);
        }
    }

    fn ledger_for(seed: u64, hierarchy: Option<HierarchyConfig>) -> (BlockLedger<f32>, Vec<LookupQuery>, EngineConfig) {
        let layout = HeadLayout::new(2, 1, 16).unwrap();
        let mut spec = SyntheticSpec::new(8, 1200, layout, seed);
        spec.decode_steps = 1;
        let trace = gen_synthetic::<f32>(&spec).unwrap();
        let cfg = EngineConfig {
            block_size: 256,
            alpha: 128,
            local_buffer: 16,
            sink_tokens: 4,
            token_budget: 64,
            hierarchy,
            seed,
            ..EngineConfig::default()
        };
        let l = BlockLedger::prefill(
            0,
            windowed_key_view(trace.head_keys(0)),
            trace.head_values(0),
            16,
            trace.prompt_len(),
            &cfg,
        )
        .unwrap();
        let rope = RopeParams::new(16, cfg.rope_theta, cfg.window_offset).unwrap();
        let qs = (0..2).map(|h| lookup_query_view(trace.query(h, 0), &rope)).collect();
        (l, qs, cfg)
    }

    #[test]
    fn full_promotion_matches_flat_lookup() {
        let hier = HierarchyConfig {
            promote_fraction: 1.0,
            ..HierarchyConfig::default()
        };
        let (l, qs, cfg) = ledger_for(4, Some(hier));
        let flat = flat_lookup(&qs, &l, cfg.token_budget).unwrap();
        let two = hierarchical_lookup(&qs, &l, &cfg).unwrap();
        assert_eq!(flat.candidates, two.candidates);
        assert_eq!(flat.selected_refs(), two.selected_refs());
        assert_eq!(flat.aggregated, two.aggregated);
        assert!(two.key_centroid_loads > flat.key_centroid_loads);
    }

    #[test]
    fn partial_promotion_loads_fewer_centroids() {
        let (l, qs, cfg) = ledger_for(5, Some(HierarchyConfig::default()));
        let flat = flat_lookup(&qs, &l, cfg.token_budget).unwrap();
        let two = hierarchical_lookup(&qs, &l, &cfg).unwrap();
        assert!(two.key_centroid_loads < flat.key_centroid_loads);
        // Every clustered token is represented exactly once among the candidates.
        let mut tokens: Vec<usize> = two
            .candidates
            .iter()
            .flat_map(|&r| l.cluster(r).members.clone())
            .collect();
        tokens.sort_unstable();
        assert_eq!(tokens, l.clustered().collect::<Vec<_>>());
        assert!(two.selected.iter().all(|&i| two.candidates[i].level == Level::Fine));
    }

    #[test]
    fn hierarchical_lookup_requires_the_hierarchy() {
        let (l, qs, cfg) = ledger_for(6, None);
        assert!(matches!(hierarchical_lookup(&qs, &l, &cfg), Err(Error::Config(_))));
    }

    proptest! {
        #[test]
        fn common_scaling_keeps_selection(seed in 0u64..500, factor in 0.01f64..100.0, budget in 0usize..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cs = random_clusters(&mut rng, 15, 4);
            let heads: Vec<Vec<ClusterScore>> = (0..3)
                .map(|_| {
                    let q = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
                    centroid_scores(&LookupQuery::from_rotated(q), &with_refs(&cs))
                })
                .collect();
            let scaled: Vec<Vec<ClusterScore>> = heads
                .iter()
                .map(|h| h.iter().map(|s| ClusterScore { score: s.score * factor, ..*s }).collect())
                .collect();
            let a = select_clusters(&aggregate_gqa(&heads).unwrap(), budget);
            let b = select_clusters(&aggregate_gqa(&scaled).unwrap(), budget);
            prop_assert_eq!(a, b);
        }

        #[test]
        fn scores_times_sizes_sum_to_one(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cs = random_clusters(&mut rng, 1 + seed as usize % 20, 5);
            let q = (0..5).map(|_| rng.random_range(-10.0..10.0)).collect();
            let s = centroid_scores(&LookupQuery::from_rotated(q), &with_refs(&cs));
            let total: f64 = s.iter().map(|s| s.score * s.size as f64).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }
    }
}
