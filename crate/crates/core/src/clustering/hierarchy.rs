use super::kmeans::{kmeans_weighted, Init, Schedule};
use super::Cluster;
use crate::config::{EngineConfig, HierarchyConfig};
use crate::scalar::Scalar;

/// Groups the fine clusters of one block into coarse clusters.
///
/// Fine key centroids are clustered with their sizes as weights, so a coarse
/// centroid is the exact mean of every underlying token, as is its value centroid.
pub fn build_hierarchy<T: Scalar>(
    fine: &[Cluster<T>],
    block_len: usize,
    hierarchy: &HierarchyConfig,
    cfg: &EngineConfig,
    seed: u64,
) -> Vec<Cluster<T>> {
    if fine.is_empty() {
        return Vec::new();
    }
    let dim = fine[0].key_centroid.len();
    let points: Vec<T> = fine.iter().flat_map(|c| c.key_centroid.iter().copied()).collect();
    let weights: Vec<f64> = fine.iter().map(|c| c.size() as f64).collect();
    let k = block_len.div_ceil(hierarchy.coarse_ratio).clamp(1, fine.len());
    let out = kmeans_weighted(
        &points,
        Some(&weights),
        dim,
        Init::Random { k, seed },
        Schedule {
            iters: cfg.prefill_kmeans_iters,
            max_rounds: cfg.max_kmeans_rounds,
        },
    );

    let groups = out.k(dim);
    let mut children = vec![Vec::new(); groups];
    for (child, &g) in out.assignments.iter().enumerate() {
        children[g].push(child);
    }
    children
        .into_iter()
        .enumerate()
        .map(|(g, kids)| {
            let mut members: Vec<usize> = kids
                .iter()
                .flat_map(|&c| fine[c].members.iter().copied())
                .collect();
            members.sort_unstable();
            let mut value = vec![0.0f64; dim];
            let mut mass = 0.0;
            for &c in &kids {
                let w = fine[c].size() as f64;
                mass += w;
                for (a, v) in value.iter_mut().zip(&fine[c].value_centroid) {
                    *a += w * v.widen();
                }
            }
            Cluster {
                key_centroid: out.centroids[g * dim..(g + 1) * dim].to_vec(),
                value_centroid: value.iter().map(|&a| T::narrow(a / mass)).collect(),
                members,
                children: kids,
            }
        })
        .collect()
}
