//! Flat parameter vectors and the handful of reductions the trainer needs.
//!
//! All reductions are computed over a fixed number of contiguous chunks
//! (see [`crate::par`]) whose boundaries depend only on the vector length.
//! Chunk partials are accumulated in ascending chunk order, so results are
//! bit-identical regardless of thread count or whether the `parallel`
//! feature is enabled at all.

use crate::par::{self, chunk_ranges};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NumericsError {
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("empty input")]
    Empty,
    #[error("weights must be finite and sum to a positive value (sum = {sum})")]
    BadWeights { sum: f64 },
    #[error("cosine similarity undefined for a zero vector")]
    ZeroVector,
}

/// A model's parameters (or an update direction) as one flat `f64` vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    pub fn zeros(n: usize) -> Self {
        ParamVector(vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// `true` when every component is finite.
    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }
}

impl std::ops::Index<usize> for ParamVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl std::ops::IndexMut<usize> for ParamVector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

fn check_same_len(a: &[f64], b: &[f64]) -> Result<(), NumericsError> {
    if a.len() != b.len() {
        return Err(NumericsError::LengthMismatch { left: a.len(), right: b.len() });
    }
    Ok(())
}

/// Chunked dot product. Partials are summed in fixed chunk order.
pub fn dot(a: &ParamVector, b: &ParamVector) -> Result<f64, NumericsError> {
    check_same_len(&a.0, &b.0)?;
    let ranges = chunk_ranges(a.len());
    let partials = par::map_indexed(ranges.len(), |c| {
        let r = ranges[c].clone();
        let mut s = 0.0;
        for i in r {
            s += a.0[i] * b.0[i];
        }
        s
    });
    Ok(partials.into_iter().sum())
}

/// Euclidean norm, via the chunked dot product.
pub fn l2_norm(x: &ParamVector) -> f64 {
    dot(x, x).expect("same vector").sqrt()
}

/// `y += alpha * x`, in place.
pub fn axpy(alpha: f64, x: &ParamVector, y: &mut ParamVector) -> Result<(), NumericsError> {
    check_same_len(&x.0, &y.0)?;
    for (yi, xi) in y.0.iter_mut().zip(&x.0) {
        *yi += alpha * xi;
    }
    Ok(())
}

/// Weighted mean of several equally-sized vectors.
///
/// Component `j` of the result is `sum_i w_i * v_i[j] / sum_i w_i`, with the
/// terms added in input order so the result does not depend on scheduling.
/// With equal weights this reproduces the simple mean bit-for-bit.
pub fn weighted_mean(vectors: &[&ParamVector], weights: &[f64]) -> Result<ParamVector, NumericsError> {
    if vectors.is_empty() {
        return Err(NumericsError::Empty);
    }
    if vectors.len() != weights.len() {
        return Err(NumericsError::LengthMismatch { left: vectors.len(), right: weights.len() });
    }
    let n = vectors[0].len();
    for v in vectors {
        check_same_len(&vectors[0].0, &v.0)?;
    }
    let wsum: f64 = weights.iter().sum();
    if !wsum.is_finite() || wsum <= 0.0 || weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(NumericsError::BadWeights { sum: wsum });
    }
    let out = par::map_indexed(n, |j| {
        let mut s = 0.0;
        for (v, w) in vectors.iter().zip(weights) {
            s += w * v.0[j];
        }
        s / wsum
    });
    Ok(ParamVector(out))
}

/// Cosine similarity between two vectors. Undefined (an error) when either
/// vector has zero norm.
pub fn cosine_similarity(a: &ParamVector, b: &ParamVector) -> Result<f64, NumericsError> {
    let d = dot(a, b)?;
    let na = l2_norm(a);
    let nb = l2_norm(b);
    if na == 0.0 || nb == 0.0 {
        return Err(NumericsError::ZeroVector);
    }
    Ok(d / (na * nb))
}
