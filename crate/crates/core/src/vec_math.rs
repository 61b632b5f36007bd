//! Numerical substrate: dense row-major matrices, L2 normalization, cosine
//! similarity and its analytic gradient, deterministic top-K selection, and
//! seeded pseudorandom streams.
//!
//! All arithmetic is `f64`; storage formats downcast to `f32` (see
//! [`crate::data_io`]).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Norm guard: vectors with L2 norm at or below this are treated as zero.
pub const EPS_NORM: f64 = 1e-12;

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Build from a flat row-major buffer. Panics if the length does not
    /// equal `rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "buffer length != rows * cols");
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// New matrix whose rows are `self`'s rows at `indices`, in order.
    pub fn gather_rows(&self, indices: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(indices.len(), self.cols);
        for (dst, &src) in indices.iter().enumerate() {
            out.row_mut(dst).copy_from_slice(self.row(src));
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Scale `v` to unit Euclidean norm. Direction is preserved.
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if n <= EPS_NORM {
        return Err(Error::ZeroVector);
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Cosine similarity of two vectors; result clamped to [-1, 1].
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    assert_eq!(a.len(), b.len(), "cosine: dimension mismatch");
    let na = norm(a);
    let nb = norm(b);
    if na <= EPS_NORM || nb <= EPS_NORM {
        return Err(Error::ZeroVector);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Gradient of `cosine(a, b)` with respect to `a`:
/// `b / (|a||b|) - cos(a,b) * a / |a|^2`. Always orthogonal to `a`.
pub fn cosine_grad_lhs(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    assert_eq!(a.len(), b.len(), "cosine_grad_lhs: dimension mismatch");
    let na = norm(a);
    let nb = norm(b);
    if na <= EPS_NORM || nb <= EPS_NORM {
        return Err(Error::ZeroVector);
    }
    let cos = dot(a, b) / (na * nb);
    let inv_ab = 1.0 / (na * nb);
    let cos_over_na2 = cos / (na * na);
    Ok(a.iter()
        .zip(b)
        .map(|(x, y)| y * inv_ab - cos_over_na2 * x)
        .collect())
}

/// Indices of the `k` largest scores, in descending score order.
/// Ties break toward the smaller index; `exclude` is never returned.
pub fn topk_indices(scores: &[f64], k: usize, exclude: Option<usize>) -> Result<Vec<usize>> {
    let mut idx: Vec<usize> = (0..scores.len()).filter(|&i| Some(i) != exclude).collect();
    if k > idx.len() {
        return Err(Error::InsufficientCandidates {
            requested: k,
            available: idx.len(),
        });
    }
    idx.sort_unstable_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

/// Deterministic generator seeded from a single `u64`.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derive an independent sub-seed from a base seed and a stream tag, so
/// distinct consumers (init, shuffling, sampling, ...) never share a stream.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    use rand::RngExt;
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(stream);
    rng.random()
}
