//! Blockwise clustering of the KV cache.
//!
//! The clustered region of a head is split into sealed blocks of exactly `W`
//! tokens plus one mutable final block holding `alpha..W+alpha` tokens. Sinks stay
//! ahead of the first block and the trailing local buffer stays behind the final
//! block. Only the final block changes during decoding.

mod hierarchy;
pub mod kmeans;
mod ledger;
mod online;
mod summary;

pub use hierarchy::build_hierarchy;
pub use ledger::{build_prefill_index, AuditReport, BlockLedger, UpdateStats};
pub use summary::{BlockSummary, ClusterSummary, LedgerSummary};

use crate::rope::WindowedKeys;
use crate::scalar::{sq_dist, Scalar};

/// One cluster of tokens with its key and value centroids.
#[derive(Debug, Clone, PartialEq)]
pub struct Cluster<T> {
    pub key_centroid: Vec<T>,
    pub value_centroid: Vec<T>,
    /// Sorted absolute token indices.
    pub members: Vec<usize>,
    /// For coarse clusters: indices of the fine clusters (same block) they group.
    pub children: Vec<usize>,
}

impl<T: Scalar> Cluster<T> {
    pub fn size(&self) -> usize {
        self.members.len()
    }
}

/// A contiguous span of clustered tokens, `[start, end)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Block<T> {
    pub start: usize,
    pub end: usize,
    /// Fine clusters.
    pub clusters: Vec<Cluster<T>>,
    /// Coarse clusters when the hierarchy is enabled.
    pub level1: Option<Vec<Cluster<T>>>,
}

impl<T: Scalar> Block<T> {
    pub(crate) fn empty(at: usize) -> Self {
        Self {
            start: at,
            end: at,
            clusters: Vec::new(),
            level1: None,
        }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

/// Which clustering level a cluster belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize)]
pub enum Level {
    Coarse,
    Fine,
}

/// Address of a cluster inside a ledger. Blocks are numbered with sealed blocks
/// first and the final block last.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize)]
pub struct ClusterRef {
    pub block: usize,
    pub cluster: usize,
    pub level: Level,
}

/// Within-cluster sum of squares over the fine clusters of `ledger`.
pub fn wcss<T: Scalar>(ledger: &BlockLedger<T>, keys: WindowedKeys<'_, T>) -> f64 {
    ledger.blocks().map(|b| block_wcss(b, keys, ledger.dim())).sum()
}

pub fn block_wcss<T: Scalar>(block: &Block<T>, keys: WindowedKeys<'_, T>, dim: usize) -> f64 {
    block
        .clusters
        .iter()
        .map(|c| {
            c.members
                .iter()
                .map(|&t| sq_dist(&keys[t * dim..(t + 1) * dim], &c.key_centroid))
                .sum::<f64>()
        })
        .sum()
}

/// Builds clusters from a k-means labelling of the tokens `[start, start + n)`.
pub(crate) fn clusters_from_assignment<T: Scalar>(
    start: usize,
    assignments: &[usize],
    key_centroids: &[T],
    values: &[T],
    dim: usize,
) -> Vec<Cluster<T>> {
    let k = key_centroids.len() / dim;
    let mut members = vec![Vec::new(); k];
    for (i, &a) in assignments.iter().enumerate() {
        members[a].push(start + i);
    }
    members
        .into_iter()
        .enumerate()
        .filter(|(_, m)| !m.is_empty())
        .map(|(c, m)| Cluster {
            key_centroid: key_centroids[c * dim..(c + 1) * dim].to_vec(),
            value_centroid: mean_of(&m, values, dim),
            members: m,
            children: Vec::new(),
        })
        .collect()
}

/// Arithmetic mean of the rows `tokens` of `data`, accumulated in `f64`.
pub(crate) fn mean_of<T: Scalar>(tokens: &[usize], data: &[T], dim: usize) -> Vec<T> {
    let mut acc = vec![0.0f64; dim];
    for &t in tokens {
        for (a, v) in acc.iter_mut().zip(&data[t * dim..(t + 1) * dim]) {
            *a += v.widen();
        }
    }
    let n = tokens.len().max(1) as f64;
    acc.iter().map(|&a| T::narrow(a / n)).collect()
}

/// Mixes a base seed with context words (splitmix64 finalizer).
pub(crate) fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut z = base ^ 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        z = z.wrapping_add(p).wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}
