//! Rotary positional embeddings.
//!
//! Two views of the same stored (pre-rotation) vectors are used:
//!
//! * exact attention rotates queries and keys at their true positions;
//! * clustering and centroid lookup use the windowed view, in which keys sit at
//!   position 0 and the query is rotated at the fixed offset `window_offset`.
//!
//! The windowed views are wrapped in [`WindowedKeys`] and [`LookupQuery`] so the
//! approximate path cannot be fed a true-position vector by accident.

use std::ops::Deref;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct RopeParams {
    head_dim: usize,
    theta: f64,
    window_offset: usize,
    inv_freq: Vec<f64>,
}

impl RopeParams {
    pub fn new(head_dim: usize, theta: f64, window_offset: usize) -> Result<Self> {
        if head_dim == 0 || head_dim % 2 != 0 {
            return Err(Error::validation("head_dim", "rotary pairing needs an even dimension"));
        }
        if !(theta > 0.0 && theta.is_finite()) {
            return Err(Error::Config(format!("rope theta must be positive, got {theta}")));
        }
        let inv_freq = (0..head_dim / 2)
            .map(|i| theta.powf(-2.0 * i as f64 / head_dim as f64))
            .collect();
        Ok(Self {
            head_dim,
            theta,
            window_offset,
            inv_freq,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn window_offset(&self) -> usize {
        self.window_offset
    }

    /// Angular frequency of rotary pair `i`.
    pub fn frequency(&self, pair: usize) -> f64 {
        self.inv_freq[pair]
    }
}

/// Rotates `v` as if it sat at `position`, in `f64`.
pub fn rotate<T: Scalar>(v: &[T], position: usize, params: &RopeParams) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    rotate_into(v, position, params, &mut out);
    out
}

pub fn rotate_into<T: Scalar>(v: &[T], position: usize, params: &RopeParams, out: &mut [f64]) {
    assert_eq!(v.len(), params.head_dim, "vector length must equal head_dim");
    let pos = position as f64;
    for (i, &freq) in params.inv_freq.iter().enumerate() {
        let (sin, cos) = (pos * freq).sin_cos();
        let x = v[2 * i].widen();
        let y = v[2 * i + 1].widen();
        out[2 * i] = x * cos - y * sin;
        out[2 * i + 1] = x * sin + y * cos;
    }
}

/// Keys as seen by clustering and centroid construction.
#[derive(Debug, Clone, Copy)]
pub struct WindowedKeys<'a, T>(&'a [T]);

impl<T> Deref for WindowedKeys<'_, T> {
    type Target = [T];

    fn deref(&self) -> &[T] {
        self.0
    }
}

/// Windowed view of stored keys. Stored keys are pre-rotation, i.e. already "at
/// position 0", so the view is the identity.
pub fn windowed_key_view<T>(keys: &[T]) -> WindowedKeys<'_, T> {
    WindowedKeys(keys)
}

/// A query rotated at the fixed lookup offset, used only against centroids.
#[derive(Debug, Clone, PartialEq)]
pub struct LookupQuery(Vec<f64>);

impl LookupQuery {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Wraps an already-rotated vector. Intended for tests and reference code.
    pub fn from_rotated(v: Vec<f64>) -> Self {
        Self(v)
    }
}

impl Deref for LookupQuery {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

pub fn lookup_query_view<T: Scalar>(q: &[T], params: &RopeParams) -> LookupQuery {
    LookupQuery(rotate(q, params.window_offset, params))
}
