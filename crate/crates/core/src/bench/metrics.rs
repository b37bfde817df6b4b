use serde::{Deserialize, Serialize};

use crate::attention::HeadStep;
use crate::pipeline::DecodeReport;

/// Vector loads of one decode step, each a `d`-wide key or value row.
///
/// Centroid lookup reads every scored key centroid; replacement reads the value
/// centroid of every rejected cluster; selected clusters, sinks and the buffer are
/// read as exact keys and values. The dense baseline reads one key and one value
/// per cached token.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MemOpCount {
    pub key_centroid_loads: usize,
    pub value_centroid_loads: usize,
    pub exact_key_loads: usize,
    pub exact_value_loads: usize,
    pub sink_loads: usize,
    pub buffer_loads: usize,
    pub baseline_loads: usize,
    pub ratio: f64,
}

impl MemOpCount {
    pub fn total(&self) -> usize {
        self.key_centroid_loads
            + self.value_centroid_loads
            + self.exact_key_loads
            + self.exact_value_loads
            + self.sink_loads
            + self.buffer_loads
    }
}

/// Loads summed over every kv-head of a step.
pub fn count_memops(heads: &[HeadStep]) -> MemOpCount {
    let mut m = MemOpCount::default();
    for h in heads {
        m.key_centroid_loads += h.key_centroid_loads;
        m.value_centroid_loads += h.value_centroid_loads;
        m.exact_key_loads += h.selected_tokens;
        m.exact_value_loads += h.selected_tokens;
        m.sink_loads += 2 * h.sink_tokens;
        m.buffer_loads += 2 * h.buffer_tokens;
        m.baseline_loads += 2 * h.cache_len;
    }
    m.ratio = if m.baseline_loads == 0 {
        0.0
    } else {
        m.total() as f64 / m.baseline_loads as f64
    };
    m
}

/// Fraction of the oracle's top tokens that were selected, averaged over kv-heads.
/// `None` when the report was produced without the oracle.
pub fn recall_at_budget(report: &DecodeReport) -> Option<f64> {
    let topk = report.oracle_topk.as_ref()?;
    let per_head: Vec<f64> = report
        .heads
        .iter()
        .zip(topk)
        .map(|(h, top)| {
            if top.is_empty() {
                return 1.0;
            }
            // Both lists are sorted.
            let (mut i, mut j, mut hits) = (0, 0, 0usize);
            let sel = &h.selected_token_ids;
            while i < sel.len() && j < top.len() {
                match sel[i].cmp(&top[j]) {
                    std::cmp::Ordering::Less => i += 1,
                    std::cmp::Ordering::Greater => j += 1,
                    std::cmp::Ordering::Equal => {
                        hits += 1;
                        i += 1;
                        j += 1;
                    }
                }
            }
            hits as f64 / top.len() as f64
        })
        .collect();
    Some(per_head.iter().sum::<f64>() / per_head.len().max(1) as f64)
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

/// Mean relative output error over steps and query heads (NaN without the oracle).
pub fn mean_error(reports: &[DecodeReport]) -> f64 {
    mean(reports.iter().filter_map(DecodeReport::mean_error))
}

pub fn mean_recall(reports: &[DecodeReport]) -> f64 {
    mean(reports.iter().filter_map(recall_at_budget))
}

pub fn mean_memory_ratio(reports: &[DecodeReport]) -> f64 {
    mean(reports.iter().map(|r| r.memops.ratio))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{AttentionMode, StageTimes};

    fn head(cache: usize, sinks: usize, buffer: usize, selected: usize, kc: usize, vc: usize) -> HeadStep {
        HeadStep {
            cache_len: cache,
            sink_tokens: sinks,
            buffer_tokens: buffer,
            clustered_tokens: cache - sinks - buffer,
            selected_tokens: selected,
            key_centroid_loads: kc,
            value_centroid_loads: vc,
            ..HeadStep::default()
        }
    }

    fn report(heads: Vec<HeadStep>, topk: Option<Vec<Vec<usize>>>) -> DecodeReport {
        DecodeReport {
            step: 0,
            position: 0,
            mode: AttentionMode::Multipole,
            errors: None,
            selected_tokens: heads.iter().map(|h| h.selected_tokens).collect(),
            memops: count_memops(&heads),
            update_occurred: false,
            update_seconds: 0.0,
            update_distance_evals: 0,
            times: StageTimes::default(),
            heads,
            oracle_topk: topk,
            audit_violations: Vec::new(),
        }
    }

    #[test]
    fn hand_counted_step() {
        // 1000 cached tokens: 10 sinks, 150 buffered, 840 clustered in 60 clusters,
        // 8 of them (130 tokens) selected.
        let m = count_memops(&[head(1000, 10, 150, 130, 60, 52)]);
        assert_eq!(m.total(), 60 + 52 + 130 + 130 + 20 + 300);
        assert_eq!(m.baseline_loads, 2000);
        assert!((m.ratio - 692.0 / 2000.0).abs() < 1e-15);
    }

    #[test]
    fn full_budget_costs_more_than_dense() {
        let m = count_memops(&[head(1000, 10, 150, 840, 60, 0)]);
        assert!(m.ratio > 1.0);
    }

    #[test]
    fn recall_counts_overlap() {
        let mut h = head(100, 0, 0, 3, 0, 0);
        h.selected_token_ids = vec![1, 4, 9];
        let r = report(vec![h.clone()], Some(vec![vec![1, 2, 9, 11]]));
        assert_eq!(recall_at_budget(&r), Some(0.5));
        let disjoint = report(vec![h.clone()], Some(vec![vec![0, 2]]));
        assert_eq!(recall_at_budget(&disjoint), Some(0.0));
        let all = report(vec![h], Some(vec![vec![1, 4, 9]]));
        assert_eq!(recall_at_budget(&all), Some(1.0));
        assert_eq!(recall_at_budget(&report(vec![], None)), None);
    }
}
