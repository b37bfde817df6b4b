//! KV traces: head layout, the `MPKV` binary format and the synthetic mixture generator.
//!
//! Layout on disk (little-endian):
//!
//! ```text
//! offset  size  field
//!      0     4  magic "MPKV"
//!      4     4  version (u32, = 1)
//!      8     4  num_q_heads
//!     12     4  num_kv_heads
//!     16     4  head_dim
//!     20     4  prompt_len
//!     24     4  decode_steps
//!     28    12  reserved (zero)
//!     40     -  keys    f32[kv_head][position][dim]
//!            -  values  f32[kv_head][position][dim]
//!            -  queries f32[q_head][step][dim]
//! ```
//!
//! A trace holds `prompt_len + decode_steps` keys and values per kv-head: the
//! prompt, followed by the token generated at each decode step. Query `t` sits at
//! position `prompt_len + t`. Stored vectors are pre-rotation.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"MPKV";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 40;

/// Grouped-query attention layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadLayout {
    pub num_q_heads: usize,
    pub num_kv_heads: usize,
    pub head_dim: usize,
}

impl HeadLayout {
    pub fn new(num_q_heads: usize, num_kv_heads: usize, head_dim: usize) -> Result<Self> {
        let layout = Self {
            num_q_heads,
            num_kv_heads,
            head_dim,
        };
        layout.validate()?;
        Ok(layout)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_kv_heads == 0 {
            return Err(Error::validation("num_kv_heads", "must be >= 1"));
        }
        if self.num_q_heads == 0 || self.num_q_heads % self.num_kv_heads != 0 {
            return Err(Error::validation(
                "num_q_heads",
                format!(
                    "{} is not a positive multiple of num_kv_heads {}",
                    self.num_q_heads, self.num_kv_heads
                ),
            ));
        }
        if self.head_dim < 2 || self.head_dim % 2 != 0 {
            return Err(Error::validation(
                "head_dim",
                format!("{} must be even and >= 2", self.head_dim),
            ));
        }
        Ok(())
    }

    /// Query heads per kv-head.
    pub fn group_size(&self) -> usize {
        self.num_q_heads / self.num_kv_heads
    }

    pub fn kv_head_of(&self, q_head: usize) -> usize {
        q_head / self.group_size()
    }

    pub fn q_heads_of(&self, kv_head: usize) -> std::ops::Range<usize> {
        let g = self.group_size();
        kv_head * g..(kv_head + 1) * g
    }
}

/// A recorded or synthetic decode trace.
#[derive(Debug, Clone, PartialEq)]
pub struct KvTrace<T> {
    layout: HeadLayout,
    prompt_len: usize,
    decode_steps: usize,
    keys: Vec<T>,
    values: Vec<T>,
    queries: Vec<T>,
}

impl<T: Scalar> KvTrace<T> {
    pub fn new(
        layout: HeadLayout,
        prompt_len: usize,
        decode_steps: usize,
        keys: Vec<T>,
        values: Vec<T>,
        queries: Vec<T>,
    ) -> Result<Self> {
        layout.validate()?;
        let d = layout.head_dim;
        let seq = prompt_len + decode_steps;
        let kv_len = layout.num_kv_heads * seq * d;
        if keys.len() != kv_len {
            return Err(Error::validation(
                "keys",
                format!("expected {kv_len} scalars, got {}", keys.len()),
            ));
        }
        if values.len() != keys.len() {
            return Err(Error::validation(
                "values",
                format!(
                    "length {} differs from keys length {}",
                    values.len(),
                    keys.len()
                ),
            ));
        }
        let q_len = layout.num_q_heads * decode_steps * d;
        if queries.len() != q_len {
            return Err(Error::validation(
                "queries",
                format!("expected {q_len} scalars, got {}", queries.len()),
            ));
        }
        if keys.iter().chain(&values).chain(&queries).any(|x| !x.is_finite()) {
            return Err(Error::validation("keys/values/queries", "non-finite entry"));
        }
        Ok(Self {
            layout,
            prompt_len,
            decode_steps,
            keys,
            values,
            queries,
        })
    }

    pub fn layout(&self) -> HeadLayout {
        self.layout
    }

    pub fn head_dim(&self) -> usize {
        self.layout.head_dim
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn decode_steps(&self) -> usize {
        self.decode_steps
    }

    /// Total token positions per kv-head.
    pub fn seq_len(&self) -> usize {
        self.prompt_len + self.decode_steps
    }

    /// All keys of one kv-head, `[position][dim]`.
    pub fn head_keys(&self, kv_head: usize) -> &[T] {
        let n = self.seq_len() * self.head_dim();
        &self.keys[kv_head * n..(kv_head + 1) * n]
    }

    pub fn head_values(&self, kv_head: usize) -> &[T] {
        let n = self.seq_len() * self.head_dim();
        &self.values[kv_head * n..(kv_head + 1) * n]
    }

    pub fn key(&self, kv_head: usize, pos: usize) -> &[T] {
        let d = self.head_dim();
        &self.head_keys(kv_head)[pos * d..(pos + 1) * d]
    }

    pub fn value(&self, kv_head: usize, pos: usize) -> &[T] {
        let d = self.head_dim();
        &self.head_values(kv_head)[pos * d..(pos + 1) * d]
    }

    pub fn query(&self, q_head: usize, step: usize) -> &[T] {
        let d = self.head_dim();
        let base = (q_head * self.decode_steps + step) * d;
        &self.queries[base..base + d]
    }

    /// Position of the query issued at decode step `step`.
    pub fn query_position(&self, step: usize) -> usize {
        self.prompt_len + step
    }

    /// Number of scalars across keys, values and queries.
    pub fn total_scalars(&self) -> usize {
        self.keys.len() + self.values.len() + self.queries.len()
    }

    /// Drops decode steps beyond `steps`, keeping the prompt.
    pub fn truncate_steps(&self, steps: usize) -> Self {
        let steps = steps.min(self.decode_steps);
        let d = self.head_dim();
        let seq = self.prompt_len + steps;
        let mut keys = Vec::with_capacity(self.layout.num_kv_heads * seq * d);
        let mut values = Vec::with_capacity(keys.capacity());
        for h in 0..self.layout.num_kv_heads {
            keys.extend_from_slice(&self.head_keys(h)[..seq * d]);
            values.extend_from_slice(&self.head_values(h)[..seq * d]);
        }
        let mut queries = Vec::with_capacity(self.layout.num_q_heads * steps * d);
        for qh in 0..self.layout.num_q_heads {
            let base = qh * self.decode_steps * d;
            queries.extend_from_slice(&self.queries[base..base + steps * d]);
        }
        Self {
            layout: self.layout,
            prompt_len: self.prompt_len,
            decode_steps: steps,
            keys,
            values,
            queries,
        }
    }

    /// Encodes the trace in the `MPKV` format (scalars narrowed to `f32`).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.total_scalars());
        out.extend_from_slice(MAGIC);
        for field in [
            VERSION as usize,
            self.layout.num_q_heads,
            self.layout.num_kv_heads,
            self.layout.head_dim,
            self.prompt_len,
            self.decode_steps,
        ] {
            out.extend_from_slice(&(field as u32).to_le_bytes());
        }
        out.extend_from_slice(&[0u8; 12]);
        for x in self.keys.iter().chain(&self.values).chain(&self.queries) {
            out.extend_from_slice(&(x.widen() as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |offset: usize, reason: &str| Error::Format {
            offset,
            reason: reason.to_string(),
        };
        if bytes.len() < HEADER_LEN {
            return Err(fmt(bytes.len(), "truncated header"));
        }
        if &bytes[0..4] != MAGIC {
            return Err(fmt(0, "bad magic, expected \"MPKV\""));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
        if word(4) != VERSION as usize {
            return Err(fmt(4, &format!("unsupported version {}", word(4))));
        }
        let layout = HeadLayout {
            num_q_heads: word(8),
            num_kv_heads: word(12),
            head_dim: word(16),
        };
        layout.validate()?;
        let prompt_len = word(20);
        let decode_steps = word(24);
        if bytes[28..40].iter().any(|&b| b != 0) {
            return Err(fmt(28, "reserved bytes must be zero"));
        }

        let d = layout.head_dim;
        let kv_floats = layout.num_kv_heads * (prompt_len + decode_steps) * d;
        let q_floats = layout.num_q_heads * decode_steps * d;
        let body = &bytes[HEADER_LEN..];
        let section = |start: usize, floats: usize, field: &'static str| -> Result<Vec<T>> {
            let end = start + floats * 4;
            if body.len() < end {
                return Err(Error::validation(
                    field,
                    format!(
                        "expected {floats} floats, file holds {}",
                        body.len().saturating_sub(start) / 4
                    ),
                ));
            }
            Ok(body[start..end]
                .chunks_exact(4)
                .map(|c| T::narrow(f32::from_le_bytes(c.try_into().unwrap()) as f64))
                .collect())
        };
        let keys = section(0, kv_floats, "keys")?;
        let values = section(kv_floats * 4, kv_floats, "values")?;
        let queries = section(kv_floats * 8, q_floats, "queries")?;
        let consumed = HEADER_LEN + (2 * kv_floats + q_floats) * 4;
        if bytes.len() != consumed {
            return Err(fmt(consumed, "trailing bytes after queries"));
        }
        Self::new(layout, prompt_len, decode_steps, keys, values, queries)
    }
}

pub fn load_trace<T: Scalar>(path: impl AsRef<Path>) -> Result<KvTrace<T>> {
    let bytes = fs::read(path)?;
    KvTrace::from_bytes(&bytes)
}

pub fn write_trace<T: Scalar>(trace: &KvTrace<T>, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(&trace.to_bytes())?;
    w.flush()?;
    Ok(())
}

/// Parameters of the synthetic Gaussian-mixture workload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_clusters_true: usize,
    /// Total positions: prompt plus decode steps.
    pub seq_len: usize,
    pub decode_steps: usize,
    pub layout: HeadLayout,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Query magnitude relative to a unit mean; controls attention sharpness.
    pub query_scale: f64,
    /// Number of mixture means each query head draws its queries near.
    pub hot_clusters: usize,
    /// Fraction of rotary pairs, counted from the lowest frequency, that carry the
    /// mixture means. `1.0` gives isotropic means.
    pub semantic_fraction: f64,
}

impl SyntheticSpec {
    pub fn new(num_clusters_true: usize, seq_len: usize, layout: HeadLayout, seed: u64) -> Self {
        Self {
            num_clusters_true,
            seq_len,
            decode_steps: 0,
            layout,
            noise_sigma: 0.1,
            seed,
            query_scale: 1.0,
            hot_clusters: 2,
            semantic_fraction: 1.0,
        }
    }
}

/// A synthetic trace together with its ground truth.
#[derive(Debug, Clone)]
pub struct Synthetic<T> {
    pub trace: KvTrace<T>,
    /// Mixture component of every position, per kv-head.
    pub labels: Vec<Vec<usize>>,
    /// Mixture means per kv-head, `[component][dim]`, narrowed to storage precision.
    pub means: Vec<Vec<Vec<T>>>,
}

pub fn gen_synthetic<T: Scalar>(spec: &SyntheticSpec) -> Result<KvTrace<T>> {
    gen_synthetic_labeled(spec).map(|s| s.trace)
}

pub fn gen_synthetic_labeled<T: Scalar>(spec: &SyntheticSpec) -> Result<Synthetic<T>> {
    let layout = spec.layout;
    layout.validate()?;
    if spec.num_clusters_true == 0 || spec.seq_len < spec.num_clusters_true {
        return Err(Error::validation(
            "num_clusters_true",
            format!(
                "need seq_len ({}) >= num_clusters_true ({}) >= 1",
                spec.seq_len, spec.num_clusters_true
            ),
        ));
    }
    if spec.decode_steps >= spec.seq_len {
        return Err(Error::validation(
            "decode_steps",
            "must leave at least one prompt token",
        ));
    }
    if !(spec.noise_sigma >= 0.0) || !(spec.query_scale.is_finite()) {
        return Err(Error::validation("noise_sigma", "must be non-negative"));
    }
    if !(spec.semantic_fraction > 0.0 && spec.semantic_fraction <= 1.0) {
        return Err(Error::validation("semantic_fraction", "must lie in (0, 1]"));
    }

    let d = layout.head_dim;
    let pairs = d / 2;
    let semantic_pairs = ((spec.semantic_fraction * pairs as f64).ceil() as usize).clamp(1, pairs);
    let first_dim = 2 * (pairs - semantic_pairs);

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let gauss = move |rng: &mut ChaCha8Rng| -> f64 { rng.sample(StandardNormal) };

    let seq = spec.seq_len;
    let mut keys = Vec::with_capacity(layout.num_kv_heads * seq * d);
    let mut values = Vec::with_capacity(keys.capacity());
    let mut labels = Vec::with_capacity(layout.num_kv_heads);
    let mut means_out = Vec::with_capacity(layout.num_kv_heads);
    let mut head_means = Vec::with_capacity(layout.num_kv_heads);

    for _ in 0..layout.num_kv_heads {
        let means: Vec<Vec<f64>> = (0..spec.num_clusters_true)
            .map(|_| {
                let mut m = vec![0.0; d];
                for x in &mut m[first_dim..] {
                    *x = gauss(&mut rng);
                }
                let n = crate::scalar::norm(&m).max(f64::MIN_POSITIVE);
                m.iter_mut().for_each(|x| *x /= n);
                m
            })
            .collect();
        let mut head_labels = Vec::with_capacity(seq);
        for _ in 0..seq {
            let c = rng.random_range(0..spec.num_clusters_true);
            head_labels.push(c);
            for &mu in &means[c] {
                keys.push(T::narrow(mu + spec.noise_sigma * gauss(&mut rng)));
            }
        }
        for _ in 0..seq * d {
            values.push(T::narrow(gauss(&mut rng)));
        }
        labels.push(head_labels);
        means_out.push(
            means
                .iter()
                .map(|m| m.iter().map(|&x| T::narrow(x)).collect())
                .collect(),
        );
        head_means.push(means);
    }

    let mut queries = Vec::with_capacity(layout.num_q_heads * spec.decode_steps * d);
    for qh in 0..layout.num_q_heads {
        let means = &head_means[layout.kv_head_of(qh)];
        let hot_count = spec.hot_clusters.clamp(1, spec.num_clusters_true);
        let hot = index::sample(&mut rng, spec.num_clusters_true, hot_count).into_vec();
        for _ in 0..spec.decode_steps {
            let c = hot[rng.random_range(0..hot.len())];
            for &mu in &means[c] {
                let x = spec.query_scale * (mu + spec.noise_sigma * gauss(&mut rng));
                queries.push(T::narrow(x));
            }
        }
    }

    let trace = KvTrace::new(
        layout,
        seq - spec.decode_steps,
        spec.decode_steps,
        keys,
        values,
        queries,
    )?;
    Ok(Synthetic {
        trace,
        labels,
        means: means_out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_layout() -> HeadLayout {
        HeadLayout::new(8, 2, 4).unwrap()
    }

    #[test]
    fn header_round_trip_reports_group_size() {
        let mut spec = SyntheticSpec::new(4, 64, small_layout(), 3);
        spec.decode_steps = 0;
        let t: KvTrace<f32> = gen_synthetic(&spec).unwrap();
        let back = KvTrace::<f32>::from_bytes(&t.to_bytes()).unwrap();
        assert_eq!(back.layout().group_size(), 4);
        assert_eq!(back.seq_len(), 64);
        assert_eq!(back, t);
    }

    #[test]
    fn mismatched_values_length_is_rejected() {
        let layout = HeadLayout::new(1, 1, 4).unwrap();
        let err = KvTrace::<f32>::new(layout, 16, 0, vec![0.0; 64], vec![0.0; 63], vec![])
            .unwrap_err();
        assert!(matches!(err, Error::Validation { field: "values", .. }), "{err}");
    }

    #[test]
    fn truncated_values_section_names_the_field() {
        let layout = HeadLayout::new(1, 1, 4).unwrap();
        let t = KvTrace::<f32>::new(layout, 16, 0, vec![1.0; 64], vec![2.0; 64], vec![]).unwrap();
        let bytes = t.to_bytes();
        let err = KvTrace::<f32>::from_bytes(&bytes[..bytes.len() - 16]).unwrap_err();
        assert!(matches!(err, Error::Validation { field: "values", .. }), "{err}");
    }

    #[test]
    fn malformed_headers_report_offsets() {
        let layout = HeadLayout::new(1, 1, 2).unwrap();
        let t = KvTrace::<f32>::new(layout, 1, 0, vec![1.0; 2], vec![2.0; 2], vec![]).unwrap();
        let mut bytes = t.to_bytes();
        bytes[0] = b'X';
        assert!(matches!(
            KvTrace::<f32>::from_bytes(&bytes),
            Err(Error::Format { offset: 0, .. })
        ));
        let mut bytes = t.to_bytes();
        bytes[4] = 2;
        assert!(matches!(
            KvTrace::<f32>::from_bytes(&bytes),
            Err(Error::Format { offset: 4, .. })
        ));
        assert!(matches!(
            KvTrace::<f32>::from_bytes(&bytes[..20]),
            Err(Error::Format { .. })
        ));
        let mut bytes = t.to_bytes();
        bytes.push(0);
        assert!(matches!(
            KvTrace::<f32>::from_bytes(&bytes),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn prompt_only_trace_has_zero_steps() {
        let layout = HeadLayout::new(2, 1, 2).unwrap();
        let t = KvTrace::<f32>::new(layout, 3, 0, vec![0.5; 6], vec![0.25; 6], vec![]).unwrap();
        let bytes = t.to_bytes();
        assert_eq!(u32::from_le_bytes(bytes[24..28].try_into().unwrap()), 0);
        assert_eq!(bytes.len(), HEADER_LEN + 4 * 12);
    }

    #[test]
    fn zero_noise_keys_equal_their_means() {
        let mut spec = SyntheticSpec::new(5, 200, small_layout(), 9);
        spec.noise_sigma = 0.0;
        let s = gen_synthetic_labeled::<f32>(&spec).unwrap();
        for h in 0..2 {
            for pos in 0..200 {
                assert_eq!(s.trace.key(h, pos), &s.means[h][s.labels[h][pos]][..]);
            }
        }
    }

    #[test]
    fn generator_is_deterministic() {
        let mut spec = SyntheticSpec::new(8, 300, small_layout(), 42);
        spec.decode_steps = 20;
        let a: KvTrace<f32> = gen_synthetic(&spec).unwrap();
        let b: KvTrace<f32> = gen_synthetic(&spec).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        spec.seed = 43;
        let c: KvTrace<f32> = gen_synthetic(&spec).unwrap();
        assert_ne!(a.to_bytes(), c.to_bytes());
    }

    #[test]
    fn semantic_fraction_confines_means_to_low_frequency_pairs() {
        let layout = HeadLayout::new(1, 1, 16).unwrap();
        let mut spec = SyntheticSpec::new(3, 50, layout, 1);
        spec.noise_sigma = 0.0;
        spec.semantic_fraction = 0.25;
        let t: KvTrace<f32> = gen_synthetic(&spec).unwrap();
        for pos in 0..50 {
            let k = t.key(0, pos);
            assert!(k[..12].iter().all(|&x| x == 0.0));
            let n: f32 = k.iter().map(|x| x * x).sum::<f32>().sqrt();
            assert!((n - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn generator_rejects_bad_specs() {
        let spec = SyntheticSpec::new(10, 5, small_layout(), 0);
        assert!(gen_synthetic::<f32>(&spec).is_err());
        let mut spec = SyntheticSpec::new(1, 5, small_layout(), 0);
        spec.decode_steps = 5;
        assert!(gen_synthetic::<f32>(&spec).is_err());
    }
}
