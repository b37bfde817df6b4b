use super::partial::AttentionPartial;
use crate::error::{Error, Result};
use crate::rope::{rotate, rotate_into, RopeParams};
use crate::scalar::Scalar;

/// Dense softmax attention of one query over `keys`/`values` (rows of width `d`)
/// at the given positions, with true-position rotary embeddings and `1/√d` scaling.
pub fn exact_attention<T: Scalar>(
    q: &[T],
    q_pos: usize,
    keys: &[T],
    values: &[T],
    positions: &[usize],
    rope: &RopeParams,
) -> Result<Vec<f64>> {
    let d = q.len();
    let weights = exact_weights(q, q_pos, keys, positions, rope)?;
    let mut out = vec![0.0f64; d];
    for (i, w) in weights.iter().enumerate() {
        for (o, v) in out.iter_mut().zip(&values[i * d..(i + 1) * d]) {
            *o += w * v.widen();
        }
    }
    Ok(out)
}

/// Normalized exact attention weights, one per key row.
pub fn exact_weights<T: Scalar>(
    q: &[T],
    q_pos: usize,
    keys: &[T],
    positions: &[usize],
    rope: &RopeParams,
) -> Result<Vec<f64>> {
    let d = q.len();
    if positions.is_empty() {
        return Err(Error::EmptyKeys);
    }
    assert_eq!(keys.len(), positions.len() * d, "keys and positions disagree");
    let rq = rotate(q, q_pos, rope);
    let scale = 1.0 / (d as f64).sqrt();
    let mut rk = vec![0.0f64; d];
    let logits: Vec<f64> = positions
        .iter()
        .enumerate()
        .map(|(i, &pos)| {
            rotate_into(&keys[i * d..(i + 1) * d], pos, rope, &mut rk);
            rq.iter().zip(&rk).map(|(a, b)| a * b).sum::<f64>() * scale
        })
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Keys of a token set rotated at their true positions, computed once per kv-head
/// and shared by the query heads of its group.
#[derive(Debug, Clone, Default)]
pub struct RotatedKeys {
    pub tokens: Vec<usize>,
    pub rows: Vec<f64>,
}

impl RotatedKeys {
    /// `keys` holds the head's rows by token index. A row is rotated at
    /// `positions[t]` when positions are given, at `t` otherwise.
    pub fn new<T: Scalar>(tokens: Vec<usize>, keys: &[T], positions: Option<&[usize]>, rope: &RopeParams) -> Self {
        let d = rope.head_dim();
        let mut rows = vec![0.0f64; tokens.len() * d];
        for (i, &t) in tokens.iter().enumerate() {
            let pos = positions.map_or(t, |p| p[t]);
            rotate_into(&keys[t * d..(t + 1) * d], pos, rope, &mut rows[i * d..(i + 1) * d]);
        }
        Self { tokens, rows }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Partial over these tokens for a query already rotated at its position.
    pub fn partial<T: Scalar>(&self, rotated_q: &[f64], values: &[T]) -> AttentionPartial {
        let d = rotated_q.len();
        let scale = 1.0 / (d as f64).sqrt();
        AttentionPartial::from_terms(
            d,
            self.tokens.iter().enumerate().map(|(i, &t)| {
                let row = &self.rows[i * d..(i + 1) * d];
                let logit = rotated_q.iter().zip(row).map(|(a, b)| a * b).sum::<f64>() * scale;
                (logit, 1.0, &values[t * d..(t + 1) * d])
            }),
        )
    }
}

/// Exact partial over the given (sorted) token indices of one head.
pub fn sparse_exact_partial<T: Scalar>(
    q: &[T],
    q_pos: usize,
    tokens: &[usize],
    keys: &[T],
    values: &[T],
    rope: &RopeParams,
) -> AttentionPartial {
    let rotated = RotatedKeys::new(tokens.to_vec(), keys, None, rope);
    rotated.partial(&rotate(q, q_pos, rope), values)
}
