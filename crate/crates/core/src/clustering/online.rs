//! Incremental Lloyd refinement of the final block.
//!
//! Every token of the final block keeps an upper bound on the distance to its own
//! centroid and a lower bound on the distance to every other centroid slot. The
//! bounds survive across updates, so a refinement round only evaluates distances
//! for tokens whose bounds were broken by centroids that actually moved. Skipping
//! is conservative, so results match plain Lloyd iterations from the same seeds.

use std::ops::Range;

use super::{clusters_from_assignment, Cluster};
use crate::scalar::{sq_dist, Scalar};

/// Relative slack on bound comparisons, covering rounding in the bounds.
const BOUND_SLACK: f64 = 1e-9;

/// Stored lower bounds are scaled down by this much so `f32` rounding never
/// raises them above the true distance.
const ROUND_DOWN: f64 = 1.0 - 1e-7;

/// Row width granularity, so row passes run over whole lanes.
const LANES: usize = 16;

#[inline]
fn round_down(d: f64) -> f32 {
    (d.max(0.0) * ROUND_DOWN) as f32
}

fn round_stride(k: usize) -> usize {
    k.div_ceil(LANES).max(2) * LANES
}

/// Factor applied after each `f32` bound subtraction; it exceeds the relative
/// error of the two roundings involved, so bounds only ever move down.
const SHRINK: f32 = 1.0 - 1.0 / (1 << 22) as f32;

/// `d` rounded up to `f32`.
#[inline]
fn round_up(d: f64) -> f32 {
    let f = d as f32;
    if (f as f64) < d {
        f.next_up()
    } else {
        f
    }
}

#[inline]
fn min32(a: f32, b: f32) -> f32 {
    if b < a {
        b
    } else {
        a
    }
}

/// Splits a row into the slots whose bound is at most `threshold` (ascending,
/// into `near`) and the smallest bound among the rest, which is returned.
fn scan_row(row: &[f32], threshold: f32, near: &mut Vec<usize>) -> f32 {
    near.clear();
    let mut far = [f32::INFINITY; LANES];
    for (i, chunk) in row.chunks_exact(LANES).enumerate() {
        let hit = chunk.iter().fold(false, |hit, &v| hit | (v <= threshold));
        if hit {
            for (j, &v) in chunk.iter().enumerate() {
                if v <= threshold {
                    near.push(i * LANES + j);
                } else {
                    far[j] = min32(far[j], v);
                }
            }
        } else {
            for j in 0..LANES {
                far[j] = min32(far[j], chunk[j]);
            }
        }
    }
    far.into_iter().fold(f32::INFINITY, min32)
}

/// Result of one refinement.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub(crate) struct Refinement {
    pub rounds: usize,
    pub converged: bool,
    pub distance_evals: u64,
}

/// Bound maintenance owed to rows that a refinement pass has not visited yet.
#[derive(Debug, Default)]
struct Pending {
    /// Slots that moved, with their drift rounded up.
    moves: Vec<(usize, f32)>,
    /// New slots whose column still needs a first bound in rows below `fresh_rows`.
    fresh: Vec<usize>,
    /// Per fresh slot, the nearest existing slot and the distance to it.
    anchors: Vec<(usize, f64)>,
    /// `d(slot, fresh[j])` at `[slot * fresh.len() + j]`.
    sep: Vec<f64>,
    fresh_rows: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct OnlineState<T> {
    dim: usize,
    /// Token index of row 0.
    start: usize,
    /// Slot capacity; row width of `lower`.
    stride: usize,
    /// `[slot][dim]`, flat.
    centroids: Vec<T>,
    live: Vec<bool>,
    assign: Vec<u32>,
    upper: Vec<f64>,
    /// Lower bound on the distance to the nearest live slot other than `assign`.
    lower_min: Vec<f32>,
    /// `[row][slot]`, flat. The own slot and retired slots hold infinity, so a
    /// plain row minimum bounds the distance to every competitor.
    lower: Vec<f32>,
}

impl<T: Scalar> OnlineState<T> {
    /// Exact bounds for tokens `[start, start + rows)` labelled by `clusters`.
    /// Slot `i` holds cluster `i`. Returns the state and the distance evaluations.
    pub fn from_clusters(start: usize, rows: usize, clusters: &[Cluster<T>], keys: &[T], dim: usize) -> (Self, u64) {
        let k = clusters.len();
        let stride = round_stride(k + k / 2);
        let mut state = Self {
            dim,
            start,
            stride,
            centroids: vec![T::zero(); stride * dim],
            live: vec![false; stride],
            assign: vec![0; rows],
            upper: vec![0.0; rows],
            lower_min: vec![f32::INFINITY; rows],
            lower: vec![f32::INFINITY; rows * stride],
        };
        for (c, cluster) in clusters.iter().enumerate() {
            state.centroids[c * dim..(c + 1) * dim].copy_from_slice(&cluster.key_centroid);
            state.live[c] = true;
            for &t in &cluster.members {
                state.assign[t - start] = c as u32;
            }
        }
        for r in 0..rows {
            let x = &keys[(start + r) * dim..(start + r + 1) * dim];
            let a = state.assign[r] as usize;
            let mut lb = f32::INFINITY;
            for c in 0..k {
                let d = sq_dist(x, state.centroid(c)).sqrt();
                if c == a {
                    state.upper[r] = d;
                } else if state.live[c] {
                    let l = round_down(d);
                    state.lower[r * stride + c] = l;
                    lb = min32(lb, l);
                }
            }
            state.lower_min[r] = lb;
        }
        (state, (rows * k) as u64)
    }

    pub fn start(&self) -> usize {
        self.start
    }

    pub fn rows(&self) -> usize {
        self.assign.len()
    }

    fn centroid(&self, c: usize) -> &[T] {
        &self.centroids[c * self.dim..(c + 1) * self.dim]
    }

    fn live_slots(&self) -> Vec<usize> {
        (0..self.stride).filter(|&c| self.live[c]).collect()
    }

    fn alloc_slot(&mut self) -> usize {
        if let Some(c) = self.live.iter().position(|&l| !l) {
            self.live[c] = true;
            return c;
        }
        let old = self.stride;
        let stride = round_stride(old + old / 2);
        let mut lower = vec![f32::INFINITY; self.rows() * stride];
        for (dst, src) in lower.chunks_exact_mut(stride).zip(self.lower.chunks_exact(old)) {
            dst[..old].copy_from_slice(src);
        }
        self.lower = lower;
        self.centroids.resize(stride * self.dim, T::zero());
        self.live.resize(stride, false);
        self.stride = stride;
        self.live[old] = true;
        old
    }

    /// Takes slot `c` out of service for `rows`.
    fn retire(&mut self, c: usize, rows: Range<usize>) {
        self.live[c] = false;
        for r in rows {
            self.lower[r * self.stride + c] = f32::INFINITY;
        }
    }

    /// Clusters of the rows in `rows`, ordered by slot. Every live slot with a
    /// member in the range becomes one cluster.
    pub fn clusters(&self, rows: Range<usize>, values: &[T]) -> Vec<Cluster<T>> {
        let d = self.dim;
        let mut dense = vec![usize::MAX; self.stride];
        let mut centroids = Vec::new();
        let mut used = vec![false; self.stride];
        for r in rows.clone() {
            used[self.assign[r] as usize] = true;
        }
        for c in 0..self.stride {
            if used[c] {
                dense[c] = centroids.len() / d;
                centroids.extend_from_slice(self.centroid(c));
            }
        }
        let assignments: Vec<usize> = rows.clone().map(|r| dense[self.assign[r] as usize]).collect();
        clusters_from_assignment(self.start + rows.start, &assignments, &centroids, values, d)
    }

    /// Brings the bounds of row `r` up to date with `pending`.
    #[inline]
    fn settle_row(&mut self, r: usize, pending: &Pending) {
        let stride = self.stride;
        let a = self.assign[r] as usize;
        let row = &mut self.lower[r * stride..(r + 1) * stride];
        let mut lb = self.lower_min[r];
        if r < pending.fresh_rows {
            // d(x, s) >= d(c_a, s) - d(x, c_a), and d(x, s) >= d(x, c) - d(c, s) for
            // the existing slot c nearest to s.
            let u = self.upper[r];
            let n = pending.fresh.len();
            for (j, &s) in pending.fresh.iter().enumerate() {
                let (anchor, anchor_dist) = pending.anchors[j];
                let via_own = pending.sep[a * n + j] - u;
                let via_anchor = if anchor == a { via_own } else { row[anchor] as f64 - anchor_dist };
                let l = round_down(via_own.max(via_anchor));
                row[s] = l;
                lb = min32(lb, l);
            }
        }
        for &(c, drift) in &pending.moves {
            if c == a {
                self.upper[r] += drift as f64;
            } else {
                let l = (row[c] - drift) * SHRINK;
                let l = if l > 0.0 { l } else { 0.0 };
                row[c] = l;
                lb = min32(lb, l);
            }
        }
        self.lower_min[r] = lb;
    }

    /// Sets slot `c` to `pos` and returns its drift.
    fn move_slot(&mut self, c: usize, pos: &[T]) -> f64 {
        let d = self.dim;
        let drift = sq_dist(&self.centroids[c * d..(c + 1) * d], pos).sqrt();
        self.centroids[c * d..(c + 1) * d].copy_from_slice(pos);
        drift
    }

    /// Adds the tokens `appended` (which directly follow the current rows) with a
    /// single-shot assignment against the live centroids plus the `samples` keys,
    /// moves every touched candidate to the running mean of its tokens, then
    /// refines all rows. Candidates that attract no token are discarded.
    pub fn append(&mut self, keys: &[T], appended: Range<usize>, samples: &[usize], cap: usize) -> Refinement {
        let d = self.dim;
        assert_eq!(appended.start, self.start + self.rows(), "appended tokens must follow the block");
        let old_rows = self.rows();
        let mut evals = 0u64;

        // Candidate order: existing clusters by slot, then samples.
        let existing = self.live_slots();
        let mut counts: Vec<usize> = vec![0; self.stride];
        for r in 0..old_rows {
            counts[self.assign[r] as usize] += 1;
        }
        let mut candidates = existing.clone();
        for &t in samples {
            let s = self.alloc_slot();
            self.centroids[s * d..(s + 1) * d].copy_from_slice(&keys[t * d..(t + 1) * d]);
            candidates.push(s);
        }
        counts.resize(self.stride, 0);
        let before = counts.clone();
        let new_slots = &candidates[existing.len()..];

        // Separation of every existing centroid from each sample, for the first
        // bounds of old rows against the new slots.
        let mut pending = Pending {
            fresh: new_slots.to_vec(),
            sep: vec![0.0f64; self.stride * new_slots.len()],
            fresh_rows: old_rows,
            ..Pending::default()
        };
        pending.anchors = vec![(0, f64::INFINITY); new_slots.len()];
        for &a in &existing {
            for (j, &s) in new_slots.iter().enumerate() {
                let sep = sq_dist(self.centroid(a), self.centroid(s)).sqrt();
                pending.sep[a * new_slots.len() + j] = sep;
                if sep < pending.anchors[j].1 {
                    pending.anchors[j] = (a, sep);
                }
            }
        }
        evals += (existing.len() * new_slots.len()) as u64;

        // Single-shot assignment of the new tokens; sums start from the centroids.
        let mut sums = vec![0.0f64; self.stride * d];
        for &c in &candidates {
            let n = counts[c] as f64;
            for (s, v) in sums[c * d..(c + 1) * d].iter_mut().zip(self.centroid(c)) {
                *s = v.widen() * n;
            }
        }
        let stride = self.stride;
        self.lower.resize((old_rows + appended.len()) * stride, f32::INFINITY);
        let mut dist = vec![0.0f64; candidates.len()];
        for t in appended.clone() {
            let x = &keys[t * d..(t + 1) * d];
            let mut best = (0usize, f64::INFINITY);
            for (i, &c) in candidates.iter().enumerate() {
                let sq = sq_dist(x, self.centroid(c));
                dist[i] = sq;
                if sq < best.1 {
                    best = (i, sq);
                }
            }
            evals += candidates.len() as u64;
            let r = self.assign.len();
            let a = candidates[best.0];
            let mut lb = f32::INFINITY;
            for (i, &c) in candidates.iter().enumerate() {
                if i != best.0 {
                    let l = round_down(dist[i].sqrt());
                    self.lower[r * stride + c] = l;
                    lb = min32(lb, l);
                }
            }
            self.assign.push(a as u32);
            self.upper.push(best.1.sqrt());
            self.lower_min.push(lb);
            counts[a] += 1;
            for (s, v) in sums[a * d..(a + 1) * d].iter_mut().zip(x) {
                *s += v.widen();
            }
        }

        // Touched candidates become running means; unused samples are dropped.
        for &c in &candidates {
            if counts[c] == 0 {
                // Only a sample can end up empty; its column was never written.
                self.live[c] = false;
                let n = pending.fresh.len();
                if let Some(j) = pending.fresh.iter().position(|&s| s == c) {
                    pending.fresh.remove(j);
                    pending.anchors.remove(j);
                    let sep = std::mem::take(&mut pending.sep);
                    pending.sep = sep
                        .chunks_exact(n)
                        .flat_map(|row| row.iter().enumerate().filter(|&(i, _)| i != j).map(|(_, &v)| v))
                        .collect();
                }
                for r in old_rows..self.rows() {
                    self.lower[r * self.stride + c] = f32::INFINITY;
                }
            } else if counts[c] > before[c] {
                let n = counts[c] as f64;
                let pos: Vec<T> = sums[c * d..(c + 1) * d].iter().map(|s| T::narrow(s / n)).collect();
                let drift = self.move_slot(c, &pos);
                if drift > 0.0 {
                    pending.moves.push((c, round_up(drift)));
                }
            }
        }

        let mut out = self.refine(keys, 0..self.rows(), cap, pending);
        out.distance_evals += evals;
        out
    }

    /// Lloyd rounds over `rows` against the live slots, until no assignment
    /// changes or `cap` rounds ran. Centroids always end as the means of their
    /// members; slots that lose every member are retired.
    fn refine(&mut self, keys: &[T], rows: Range<usize>, cap: usize, mut pending: Pending) -> Refinement {
        let d = self.dim;
        let stride = self.stride;
        let mut out = Refinement::default();
        let mut changed = vec![false; stride];
        let mut near = Vec::new();
        while out.rounds < cap.max(1) {
            changed.iter_mut().for_each(|c| *c = false);
            let mut reassigned = 0usize;
            let settle = !pending.moves.is_empty() || pending.fresh_rows > rows.start;
            for r in rows.clone() {
                if settle {
                    self.settle_row(r, &pending);
                }
                if self.upper[r] * (1.0 + BOUND_SLACK) < self.lower_min[r] as f64 {
                    continue;
                }
                let t = self.start + r;
                let x = &keys[t * d..(t + 1) * d];
                let a = self.assign[r] as usize;
                let a_sq = sq_dist(x, self.centroid(a));
                let u = a_sq.sqrt();
                out.distance_evals += 1;
                self.upper[r] = u;
                if u * (1.0 + BOUND_SLACK) < self.lower_min[r] as f64 {
                    continue;
                }
                let (mut best, mut best_sq, mut best_d) = (a, a_sq, u);
                let row = &mut self.lower[r * stride..(r + 1) * stride];
                let far = scan_row(row, round_up(u * (1.0 + BOUND_SLACK)), &mut near);
                for &c in &near {
                    if row[c] as f64 > best_d * (1.0 + BOUND_SLACK) {
                        continue;
                    }
                    let sq = sq_dist(x, &self.centroids[c * d..(c + 1) * d]);
                    out.distance_evals += 1;
                    row[c] = round_down(sq.sqrt());
                    if sq < best_sq || (sq == best_sq && c < best) {
                        best = c;
                        best_sq = sq;
                        best_d = sq.sqrt();
                    }
                }
                if best != a {
                    row[a] = round_down(u);
                    row[best] = f32::INFINITY;
                    self.assign[r] = best as u32;
                    self.upper[r] = best_d;
                    changed[a] = true;
                    changed[best] = true;
                    reassigned += 1;
                }
                let mut lb = if best != a { min32(far, row[a]) } else { far };
                for &c in &near {
                    lb = min32(lb, row[c]);
                }
                self.lower_min[r] = lb;
            }
            pending = Pending::default();
            out.rounds += 1;
            if reassigned == 0 {
                out.converged = true;
                break;
            }

            // Exact means of the clusters that gained or lost members.
            let touched: Vec<usize> = (0..stride).filter(|&c| changed[c]).collect();
            let mut slot_of = vec![usize::MAX; stride];
            for (i, &c) in touched.iter().enumerate() {
                slot_of[c] = i;
            }
            let mut sums = vec![0.0f64; touched.len() * d];
            let mut counts = vec![0usize; touched.len()];
            for r in rows.clone() {
                let i = slot_of[self.assign[r] as usize];
                if i != usize::MAX {
                    counts[i] += 1;
                    let t = self.start + r;
                    for (s, v) in sums[i * d..(i + 1) * d].iter_mut().zip(&keys[t * d..(t + 1) * d]) {
                        *s += v.widen();
                    }
                }
            }
            for (i, &c) in touched.iter().enumerate() {
                if counts[i] == 0 {
                    self.retire(c, rows.clone());
                    continue;
                }
                let n = counts[i] as f64;
                let pos: Vec<T> = sums[i * d..(i + 1) * d].iter().map(|s| T::narrow(s / n)).collect();
                let drift = self.move_slot(c, &pos);
                if drift > 0.0 {
                    pending.moves.push((c, round_up(drift)));
                }
            }
        }
        if !pending.moves.is_empty() {
            for r in rows {
                self.settle_row(r, &pending);
            }
        }
        out
    }

    /// Cuts the block after `w` rows. Clusters with members on both sides are split
    /// into two, each side is refined on its own, and the first `w` rows are
    /// removed. Returns the clusters of the removed rows.
    pub fn split(&mut self, keys: &[T], values: &[T], w: usize, cap: usize) -> (Vec<Cluster<T>>, Refinement) {
        let d = self.dim;
        let n = self.rows();
        assert!(w > 0 && w < n, "split point outside the block");
        let stride = self.stride;
        let mut left = vec![0usize; stride];
        let mut right = vec![0usize; stride];
        let mut left_sum = vec![0.0f64; stride * d];
        let mut right_sum = vec![0.0f64; stride * d];
        for r in 0..n {
            let a = self.assign[r] as usize;
            let t = self.start + r;
            let (count, sum) = if r < w { (&mut left, &mut left_sum) } else { (&mut right, &mut right_sum) };
            count[a] += 1;
            for (s, v) in sum[a * d..(a + 1) * d].iter_mut().zip(&keys[t * d..(t + 1) * d]) {
                *s += v.widen();
            }
        }
        let saved_centroids = self.centroids.clone();
        let saved_live = self.live.clone();

        let side = |state: &mut Self, rows: Range<usize>, count: &[usize], sum: &[f64], other: &[usize]| {
            let mut pending = Pending::default();
            for c in 0..stride {
                if !state.live[c] {
                    continue;
                }
                if count[c] == 0 {
                    state.retire(c, rows.clone());
                } else if other[c] > 0 {
                    let m = count[c] as f64;
                    let pos: Vec<T> = sum[c * d..(c + 1) * d].iter().map(|s| T::narrow(s / m)).collect();
                    let drift = state.move_slot(c, &pos);
                    if drift > 0.0 {
                        pending.moves.push((c, round_up(drift)));
                    }
                }
            }
            state.refine(keys, rows, cap, pending)
        };

        let left_out = side(self, 0..w, &left, &left_sum, &right);
        let sealed = self.clusters(0..w, values);
        self.centroids = saved_centroids;
        self.live = saved_live;
        let right_out = side(self, w..n, &right, &right_sum, &left);

        self.assign.drain(..w);
        self.upper.drain(..w);
        self.lower_min.drain(..w);
        self.lower.drain(..w * stride);
        self.start += w;
        let out = Refinement {
            rounds: left_out.rounds.max(right_out.rounds),
            converged: left_out.converged && right_out.converged,
            distance_evals: left_out.distance_evals + right_out.distance_evals,
        };
        (sealed, out)
    }
}
