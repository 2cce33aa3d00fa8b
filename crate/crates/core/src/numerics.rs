//! Dense vector kernels and stable reductions.
//!
//! Every reduction sums left to right so that results are bit-reproducible
//! for a fixed input order.

use crate::error::{ensure_dim, Error, Result};

/// Dot product with a fixed left-to-right summation order.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn all_finite(a: &[f64]) -> bool {
    a.iter().all(|x| x.is_finite())
}

/// Cosine similarity, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    ensure_dim(a.len(), b.len())?;
    if a.is_empty() {
        return Err(Error::Empty("cosine_similarity"));
    }
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm("cosine_similarity"));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

pub fn log_sum_exp(xs: &[f64]) -> Result<f64> {
    let max = xs
        .iter()
        .copied()
        .reduce(f64::max)
        .ok_or(Error::Empty("log_sum_exp"))?;
    if !max.is_finite() {
        return Err(Error::NonFinite("log_sum_exp"));
    }
    if xs.len() == 1 {
        return Ok(max);
    }
    let mut sum = 0.0;
    for x in xs {
        sum += (x - max).exp();
    }
    Ok(max + sum.ln())
}

/// `log(1 + sum exp(x))`, accurate to the last bits when every `x` is very
/// negative. Empty input gives 0.
pub fn log1p_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max <= 0.0 {
        xs.iter().map(|x| x.exp()).sum::<f64>().ln_1p()
    } else {
        max + ((-max).exp() + xs.iter().map(|x| (x - max).exp()).sum::<f64>()).ln()
    }
}

/// Probability vector produced by [`stable_softmax`].
#[derive(Debug, Clone, PartialEq)]
pub struct Probabilities(Vec<f64>);

impl Probabilities {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

pub fn stable_softmax(xs: &[f64]) -> Result<Probabilities> {
    let max = xs
        .iter()
        .copied()
        .reduce(f64::max)
        .ok_or(Error::Empty("stable_softmax"))?;
    if !max.is_finite() {
        return Err(Error::NonFinite("stable_softmax"));
    }
    let exps: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(Probabilities(exps.into_iter().map(|e| e / sum).collect()))
}

/// Index of the maximum; ties resolve to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Index of the minimum; ties resolve to the lowest index.
pub fn argmin(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x < xs[best] {
            best = i;
        }
    }
    best
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Gradients of `cos(a, b)` with respect to both arguments, given `cos = s`.
///
/// d cos / da = b / (|a||b|) - s a / |a|^2, and symmetrically for `b`.
pub fn cosine_gradients(a: &[f64], b: &[f64], s: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    ensure_dim(a.len(), b.len())?;
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm("cosine_gradients"));
    }
    let inv = 1.0 / (na * nb);
    let da = a
        .iter()
        .zip(b)
        .map(|(x, y)| y * inv - s * x / (na * na))
        .collect();
    let db = a
        .iter()
        .zip(b)
        .map(|(x, y)| x * inv - s * y / (nb * nb))
        .collect();
    Ok((da, db))
}

/// Elementwise mean of equally sized vectors.
pub fn mean_of<'a, I>(vectors: I, dim: usize) -> Result<Vec<f64>>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut acc = vec![0.0; dim];
    let mut count = 0usize;
    for v in vectors {
        ensure_dim(dim, v.len())?;
        for (a, x) in acc.iter_mut().zip(v) {
            *a += x;
        }
        count += 1;
    }
    if count == 0 {
        return Err(Error::Empty("mean_of"));
    }
    let scale = count as f64;
    for a in &mut acc {
        *a /= scale;
    }
    Ok(acc)
}

/// Row-major dense matrix.
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

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        ensure_dim(rows * cols, data.len())?;
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        ensure_dim(self.cols, x.len())?;
        Ok((0..self.rows).map(|r| dot(self.row(r), x)).collect())
    }

    /// `self^T y`
    pub fn matvec_transposed(&self, y: &[f64]) -> Result<Vec<f64>> {
        ensure_dim(self.rows, y.len())?;
        let mut out = vec![0.0; self.cols];
        for (r, &yr) in y.iter().enumerate() {
            axpy(yr, self.row(r), &mut out);
        }
        Ok(out)
    }
}
