//! Lloyd's k-means with Hamerly bounds.
//!
//! The bounds only skip distance evaluations that cannot change an assignment, so
//! results are identical to plain Lloyd iterations. Centroids are held at storage
//! precision between rounds: the centroids the caller stores are exactly the ones
//! assignments were computed against.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::scalar::{sq_dist, Scalar};

/// Relative slack on bound comparisons so rounding in the bounds never skips a
/// point whose assignment could change.
const BOUND_SLACK: f64 = 1e-9;

#[derive(Debug, Clone)]
pub enum Init<'a, T> {
    /// `k` distinct data points drawn by k-means++ seeding with the given seed.
    Random { k: usize, seed: u64 },
    /// Start from these centroids (`[cluster][dim]`, flat).
    Centroids(&'a [T]),
}

#[derive(Debug, Clone, Copy)]
pub struct Schedule {
    /// Assign/update rounds that always run (unless converged earlier).
    pub iters: usize,
    /// Total round cap; rounds past `iters` run only while assignments change.
    pub max_rounds: usize,
}

impl Schedule {
    pub fn fixed(iters: usize) -> Self {
        Self {
            iters,
            max_rounds: iters,
        }
    }
}

#[derive(Debug, Clone)]
pub struct KMeansOutput<T> {
    /// `[cluster][dim]`, flat. Every cluster is non-empty.
    pub centroids: Vec<T>,
    pub assignments: Vec<usize>,
    pub rounds: usize,
    /// True when the last assignment pass changed nothing, so every point sits in
    /// its nearest cluster and every centroid is the mean of its members.
    pub converged: bool,
    pub distance_evals: u64,
}

impl<T> KMeansOutput<T> {
    pub fn k(&self, dim: usize) -> usize {
        self.centroids.len() / dim
    }
}

/// Picks `k` distinct data points as initial centroids. The first is uniform;
/// each next one is drawn with probability proportional to its weight times its
/// squared distance to the nearest point already picked (k-means++ seeding).
/// Once every remaining point coincides with a pick, draws fall back to uniform.
/// Returns the centroids and the distance evaluations spent.
fn seed_points<T: Scalar>(points: &[T], weights: Option<&[f64]>, dim: usize, k: usize, seed: u64) -> (Vec<T>, u64) {
    let n = points.len() / dim;
    let point = |i: usize| &points[i * dim..(i + 1) * dim];
    let weight = |i: usize| weights.map_or(1.0, |w| w[i]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = vec![false; n];
    let mut nearest_sq = vec![f64::INFINITY; n];
    let mut out = Vec::with_capacity(k * dim);
    let mut evals = 0u64;
    let mut next = rng.random_range(0..n);
    for _ in 0..k {
        picked[next] = true;
        out.extend_from_slice(point(next));
        if out.len() == k * dim {
            break;
        }
        let mut mass = 0.0;
        for i in 0..n {
            if !picked[i] {
                nearest_sq[i] = nearest_sq[i].min(sq_dist(point(i), point(next)));
                mass += weight(i) * nearest_sq[i];
                evals += 1;
            }
        }
        next = if mass > 0.0 {
            let mut target = rng.random::<f64>() * mass;
            let mut chosen = None;
            for i in (0..n).filter(|&i| !picked[i]) {
                let m = weight(i) * nearest_sq[i];
                if m > 0.0 {
                    chosen = Some(i);
                    if target < m {
                        break;
                    }
                    target -= m;
                }
            }
            // Rounding can leave `target` just past the end; the last candidate takes it.
            chosen.expect("positive mass has a candidate")
        } else {
            let free: Vec<usize> = (0..n).filter(|&i| !picked[i]).collect();
            free[index::sample(&mut rng, free.len(), 1).index(0)]
        };
    }
    (out, evals)
}

/// Nearest centroid by squared Euclidean distance; ties go to the lowest index.
pub fn nearest<T: Scalar>(point: &[T], centroids: &[T], dim: usize) -> (usize, f64) {
    let mut best = (usize::MAX, f64::INFINITY);
    for (c, centroid) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_dist(point, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Plain k-means with random initialization, unit weights.
pub fn kmeans<T: Scalar>(
    points: &[T],
    dim: usize,
    k: usize,
    schedule: Schedule,
    seed: u64,
) -> KMeansOutput<T> {
    kmeans_weighted(points, None, dim, Init::Random { k, seed }, schedule)
}

pub fn kmeans_weighted<T: Scalar>(
    points: &[T],
    weights: Option<&[f64]>,
    dim: usize,
    init: Init<'_, T>,
    schedule: Schedule,
) -> KMeansOutput<T> {
    assert!(dim > 0 && points.len() % dim == 0);
    let n = points.len() / dim;
    assert!(n > 0, "k-means needs at least one point");
    if let Some(w) = weights {
        assert_eq!(w.len(), n);
    }
    let point = |i: usize| &points[i * dim..(i + 1) * dim];

    let mut evals: u64 = 0;
    let mut centroids: Vec<T> = match init {
        Init::Random { k, seed } => {
            let (c, init_evals) = seed_points(points, weights, dim, k.clamp(1, n), seed);
            evals += init_evals;
            c
        }
        Init::Centroids(c) => {
            assert!(!c.is_empty() && c.len() % dim == 0);
            c.to_vec()
        }
    };
    let k = centroids.len() / dim;

    let mut assign = vec![0usize; n];
    let mut upper = vec![0.0f64; n];
    let mut lower = vec![0.0f64; n];

    let full_scan = |i: usize, centroids: &[T], evals: &mut u64| -> (usize, f64, f64) {
        let x = point(i);
        let (mut best, mut best_d, mut second_d) = (0usize, f64::INFINITY, f64::INFINITY);
        for (c, centroid) in centroids.chunks_exact(dim).enumerate() {
            let d = sq_dist(x, centroid);
            if d < best_d {
                second_d = best_d;
                best_d = d;
                best = c;
            } else if d < second_d {
                second_d = d;
            }
        }
        *evals += (centroids.len() / dim) as u64;
        (best, best_d.sqrt(), second_d.sqrt())
    };

    for i in 0..n {
        let (a, u, l) = full_scan(i, &centroids, &mut evals);
        assign[i] = a;
        upper[i] = u;
        lower[i] = l;
    }

    let cap = schedule.iters.max(schedule.max_rounds);
    let mut rounds = 0;
    let mut converged = false;
    let mut half_sep = vec![0.0f64; k];
    loop {
        if rounds >= cap {
            break;
        }
        // Update step.
        let old = centroids.clone();
        let repaired = update_centroids(points, weights, dim, &mut assign, &mut centroids);
        let drift: Vec<f64> = old
            .chunks_exact(dim)
            .zip(centroids.chunks_exact(dim))
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .collect();
        if repaired {
            upper.iter_mut().for_each(|u| *u = f64::INFINITY);
            lower.iter_mut().for_each(|l| *l = 0.0);
        } else {
            let (top, top_idx, second) = top_two(&drift);
            for i in 0..n {
                let a = assign[i];
                upper[i] += drift[a];
                lower[i] -= if a == top_idx { second } else { top };
            }
        }
        if k > 1 {
            for c in 0..k {
                let cc = &centroids[c * dim..(c + 1) * dim];
                let mut best = f64::INFINITY;
                for (o, other) in centroids.chunks_exact(dim).enumerate() {
                    if o != c {
                        best = best.min(sq_dist(cc, other));
                    }
                }
                half_sep[c] = 0.5 * best.sqrt();
            }
            evals += (k * (k - 1)) as u64;
        }

        // Assignment step.
        let mut changed = 0usize;
        for i in 0..n {
            let a = assign[i];
            let bound = half_sep[a].max(lower[i]);
            if upper[i] * (1.0 + BOUND_SLACK) < bound {
                continue;
            }
            upper[i] = sq_dist(point(i), &centroids[a * dim..(a + 1) * dim]).sqrt();
            evals += 1;
            if upper[i] * (1.0 + BOUND_SLACK) < bound {
                continue;
            }
            let (b, u, l) = full_scan(i, &centroids, &mut evals);
            if b != a {
                changed += 1;
            }
            assign[i] = b;
            upper[i] = u;
            lower[i] = l;
        }
        rounds += 1;
        if changed == 0 && !repaired {
            converged = true;
            break;
        }
    }
    if !converged {
        // Leave centroids consistent with the final assignment.
        update_centroids(points, weights, dim, &mut assign, &mut centroids);
    }

    // Drop clusters that ended up empty and renumber densely.
    let mut counts = vec![0usize; k];
    for &a in &assign {
        counts[a] += 1;
    }
    if counts.iter().any(|&c| c == 0) {
        let mut remap = vec![usize::MAX; k];
        let mut kept = Vec::with_capacity(centroids.len());
        let mut next = 0;
        for c in 0..k {
            if counts[c] > 0 {
                remap[c] = next;
                next += 1;
                kept.extend_from_slice(&centroids[c * dim..(c + 1) * dim]);
            }
        }
        assign.iter_mut().for_each(|a| *a = remap[*a]);
        centroids = kept;
    }

    KMeansOutput {
        centroids,
        assignments: assign,
        rounds,
        converged,
        distance_evals: evals,
    }
}

fn top_two(v: &[f64]) -> (f64, usize, f64) {
    let (mut top, mut idx, mut second) = (0.0f64, usize::MAX, 0.0f64);
    for (i, &x) in v.iter().enumerate() {
        if x > top {
            second = top;
            top = x;
            idx = i;
        } else if x > second {
            second = x;
        }
    }
    (top, idx, second)
}

/// Recomputes every centroid as the (weighted) mean of its members. Empty clusters
/// are re-seeded with the farthest member of the heaviest cluster. Returns whether
/// any re-seeding happened.
fn update_centroids<T: Scalar>(
    points: &[T],
    weights: Option<&[f64]>,
    dim: usize,
    assign: &mut [usize],
    centroids: &mut [T],
) -> bool {
    let k = centroids.len() / dim;
    let mut sums = vec![0.0f64; k * dim];
    let mut mass = vec![0.0f64; k];
    for (i, &a) in assign.iter().enumerate() {
        let w = weights.map_or(1.0, |w| w[i]);
        mass[a] += w;
        let x = &points[i * dim..(i + 1) * dim];
        for (s, v) in sums[a * dim..(a + 1) * dim].iter_mut().zip(x) {
            *s += w * v.widen();
        }
    }
    let write = |c: usize, sums: &[f64], mass: &[f64], centroids: &mut [T]| {
        for j in 0..dim {
            centroids[c * dim + j] = T::narrow(sums[c * dim + j] / mass[c]);
        }
    };
    for c in 0..k {
        if mass[c] > 0.0 {
            write(c, &sums, &mass, centroids);
        }
    }

    let mut repaired = false;
    for e in 0..k {
        if mass[e] > 0.0 {
            continue;
        }
        let heaviest = (0..k)
            .filter(|&c| mass[c] > 0.0)
            .fold(None, |best: Option<usize>, c| match best {
                Some(b) if mass[b] >= mass[c] => Some(b),
                _ => Some(c),
            });
        let Some(h) = heaviest else { break };
        let centroid = centroids[h * dim..(h + 1) * dim].to_vec();
        let mut far = (usize::MAX, 0.0f64);
        for (i, &a) in assign.iter().enumerate() {
            if a == h {
                let d = sq_dist(&points[i * dim..(i + 1) * dim], &centroid);
                if d > far.1 {
                    far = (i, d);
                }
            }
        }
        // Every member coincides with the centroid: nothing to split off.
        if far.0 == usize::MAX {
            continue;
        }
        let p = far.0;
        let w = weights.map_or(1.0, |w| w[p]);
        let x = &points[p * dim..(p + 1) * dim];
        assign[p] = e;
        mass[e] = w;
        mass[h] -= w;
        for j in 0..dim {
            let v = x[j].widen();
            sums[e * dim + j] = w * v;
            sums[h * dim + j] -= w * v;
            centroids[e * dim + j] = x[j];
        }
        // Recompute the donor from scratch to avoid cancellation in `sums`.
        let mut fresh = vec![0.0f64; dim];
        let mut m = 0.0;
        for (i, &a) in assign.iter().enumerate() {
            if a == h {
                let w = weights.map_or(1.0, |w| w[i]);
                m += w;
                for (s, v) in fresh.iter_mut().zip(&points[i * dim..(i + 1) * dim]) {
                    *s += w * v.widen();
                }
            }
        }
        sums[h * dim..(h + 1) * dim].copy_from_slice(&fresh);
        mass[h] = m;
        write(h, &sums, &mass, centroids);
        repaired = true;
    }
    repaired
}
