use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Un-normalized softmax state of one attention segment.
///
/// `sum = Σ wᵢ·exp(logitᵢ − max)` and `acc = Σ wᵢ·exp(logitᵢ − max)·vᵢ`, where the
/// weight `wᵢ` is 1 for a token and the cluster size for a centroid term.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionPartial {
    pub max: f64,
    pub sum: f64,
    pub acc: Vec<f64>,
}

impl AttentionPartial {
    /// The identity element of [`merge_partials`].
    pub fn neutral(dim: usize) -> Self {
        Self {
            max: f64::NEG_INFINITY,
            sum: 0.0,
            acc: vec![0.0; dim],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.sum == 0.0
    }

    pub fn dim(&self) -> usize {
        self.acc.len()
    }

    /// Builds a partial from `(logit, weight, value)` terms.
    pub fn from_terms<'a, T: Scalar>(
        dim: usize,
        terms: impl IntoIterator<Item = (f64, f64, &'a [T])>,
    ) -> Self {
        let terms: Vec<_> = terms.into_iter().collect();
        let max = terms
            .iter()
            .map(|t| t.0)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut out = Self::neutral(dim);
        if terms.is_empty() {
            return out;
        }
        out.max = max;
        for (logit, weight, value) in terms {
            let w = weight * (logit - max).exp();
            out.sum += w;
            for (a, v) in out.acc.iter_mut().zip(value) {
                *a += w * v.widen();
            }
        }
        out
    }

    /// Attention output `acc / sum`.
    pub fn finalize(&self) -> Result<Vec<f64>> {
        if self.is_empty() {
            return Err(Error::EmptyPartials);
        }
        Ok(self.acc.iter().map(|a| a / self.sum).collect())
    }

    fn rescaled_into(&self, max: f64, sum: &mut f64, acc: &mut [f64]) {
        if self.is_empty() {
            return;
        }
        let scale = (self.max - max).exp();
        *sum += self.sum * scale;
        for (a, x) in acc.iter_mut().zip(&self.acc) {
            *a += x * scale;
        }
    }
}

/// Max-rescaled merge of partials. Order-independent up to rounding.
pub fn merge_partials(parts: &[AttentionPartial]) -> Result<AttentionPartial> {
    let live: Vec<&AttentionPartial> = parts.iter().filter(|p| !p.is_empty()).collect();
    if live.is_empty() {
        return Err(Error::EmptyPartials);
    }
    let dim = live[0].dim();
    let max = live.iter().map(|p| p.max).fold(f64::NEG_INFINITY, f64::max);
    let mut out = AttentionPartial::neutral(dim);
    out.max = max;
    for p in live {
        if p.dim() != dim {
            return Err(Error::Internal("merging partials of different widths".into()));
        }
        p.rescaled_into(max, &mut out.sum, &mut out.acc);
    }
    Ok(out)
}
