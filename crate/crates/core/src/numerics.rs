//! Dense linear algebra and statistics primitives.
//!
//! Everything here is a pure function over borrowed inputs. Vectors are plain
//! `f64` slices; [`Matrix`] is a small row-major dense matrix.

use thiserror::Error;

/// A flat real vector: a parameter update, a prediction row, or a feature row.
pub type RealVector = Vec<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("empty input")]
    Empty,
    #[error("dimension mismatch at index {index}: expected {expected}, found {found}")]
    DimensionMismatch {
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error("weights length {weights} does not match {values} values")]
    WeightCount { weights: usize, values: usize },
    #[error("negative or non-finite weight {value} at index {index}")]
    BadWeight { index: usize, value: f64 },
    #[error("weights sum to zero")]
    ZeroWeightSum,
    #[error("need at least {needed} vectors, got {got}")]
    TooFew { needed: usize, got: usize },
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not symmetric (max relative asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("power iteration did not converge (residual {residual:e})")]
    NotConverged { last: EigenPair, residual: f64 },
    #[error("probability {0} outside (0, 1)")]
    ProbabilityOutOfRange(f64),
}

pub type Result<T> = std::result::Result<T, NumericsError>;

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
            m.set(i, i, 1.0);
        }
        m
    }

    /// Builds a matrix from row-major entries; `None` if the length is wrong.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Option<Self> {
        (rows * cols == data.len()).then_some(Self { rows, cols, data })
    }

    /// Stacks equal-length rows. Returns the offending row index on mismatch.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (index, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.len() != cols {
                return Err(NumericsError::DimensionMismatch {
                    index,
                    expected: cols,
                    found: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, &v) in values.iter().enumerate() {
            m.set(i, i, v);
        }
        m
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

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics, so guard the degenerate zero-column case.
        let cols = self.cols.max(1);
        self.data.chunks_exact(cols).take(self.rows)
    }

    /// Copies the listed rows into a new matrix, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    /// `y = M x`.
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        self.iter_rows().map(|row| dot(row, x)).collect()
    }
}

/// Largest eigenvalue of a symmetric matrix with its unit eigenvector.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenPair {
    pub value: f64,
    pub vector: RealVector,
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn check_dims<V: AsRef<[f64]>>(vectors: &[V]) -> Result<usize> {
    let first = vectors.first().ok_or(NumericsError::Empty)?.as_ref().len();
    for (index, v) in vectors.iter().enumerate().skip(1) {
        let found = v.as_ref().len();
        if found != first {
            return Err(NumericsError::DimensionMismatch {
                index,
                expected: first,
                found,
            });
        }
    }
    Ok(first)
}

fn check_weights(weights: &[f64], values: usize) -> Result<f64> {
    if weights.len() != values {
        return Err(NumericsError::WeightCount {
            weights: weights.len(),
            values,
        });
    }
    for (index, &value) in weights.iter().enumerate() {
        if !(value >= 0.0) || !value.is_finite() {
            return Err(NumericsError::BadWeight { index, value });
        }
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(NumericsError::ZeroWeightSum);
    }
    Ok(total)
}

/// Coordinate-wise weighted average. Uniform weights when `weights` is `None`.
pub fn mean_vec<V: AsRef<[f64]>>(vectors: &[V], weights: Option<&[f64]>) -> Result<RealVector> {
    let dim = check_dims(vectors)?;
    let mut out = vec![0.0; dim];
    match weights {
        None => {
            for v in vectors {
                for (o, x) in out.iter_mut().zip(v.as_ref()) {
                    *o += x;
                }
            }
            let n = vectors.len() as f64;
            out.iter_mut().for_each(|o| *o /= n);
        }
        Some(w) => {
            let total = check_weights(w, vectors.len())?;
            for (v, &wi) in vectors.iter().zip(w) {
                if wi == 0.0 {
                    continue;
                }
                for (o, x) in out.iter_mut().zip(v.as_ref()) {
                    *o += wi * x;
                }
            }
            out.iter_mut().for_each(|o| *o /= total);
        }
    }
    Ok(out)
}

/// Population covariance `(1/n) Σ (x - x̄)(x - x̄)ᵀ`.
pub fn covariance<V: AsRef<[f64]>>(vectors: &[V]) -> Result<Matrix> {
    if vectors.len() < 2 {
        return Err(NumericsError::TooFew {
            needed: 2,
            got: vectors.len(),
        });
    }
    let mean = mean_vec(vectors, None)?;
    Ok(covariance_about(vectors, &mean))
}

/// Covariance about a caller-supplied mean; dimensions must already agree.
pub(crate) fn covariance_about<V: AsRef<[f64]>>(vectors: &[V], mean: &[f64]) -> Matrix {
    let d = mean.len();
    let mut cov = Matrix::zeros(d, d);
    let mut centered = vec![0.0; d];
    for v in vectors {
        for ((c, x), m) in centered.iter_mut().zip(v.as_ref()).zip(mean) {
            *c = x - m;
        }
        for i in 0..d {
            let ci = centered[i];
            if ci == 0.0 {
                continue;
            }
            let row = cov.row_mut(i);
            for j in i..d {
                row[j] += ci * centered[j];
            }
        }
    }
    let n = vectors.len() as f64;
    for i in 0..d {
        for j in i..d {
            let v = cov.get(i, j) / n;
            cov.set(i, j, v);
            cov.set(j, i, v);
        }
    }
    cov
}

const POWER_MAX_ITERS: usize = 1000;
const POWER_RQ_TOL: f64 = 1e-10;
const POWER_RESIDUAL_TOL: f64 = 1e-8;

/// `‖Mv − λv‖₂`.
pub fn eigen_residual(m: &Matrix, pair: &EigenPair) -> f64 {
    let mv = m.mul_vec(&pair.vector);
    mv.iter()
        .zip(&pair.vector)
        .map(|(a, b)| (a - pair.value * b).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Top eigenpair of a symmetric positive semi-definite matrix by power
/// iteration.
///
/// The start vector is the normalized all-ones vector. If that start is
/// annihilated by `m` while `m` is non-zero, the standard basis vectors are
/// tried in order. Iteration stops once successive Rayleigh quotients agree to
/// `1e-10` relative and the residual `‖Mv − λv‖` is at most
/// `1e-8·max(1, |λ|)`. After 1000 iterations without convergence the last
/// iterate is returned inside [`NumericsError::NotConverged`].
pub fn top_eigenpair(m: &Matrix) -> Result<EigenPair> {
    if m.rows() != m.cols() {
        return Err(NumericsError::NotSquare {
            rows: m.rows(),
            cols: m.cols(),
        });
    }
    let d = m.rows();
    if d == 0 {
        return Err(NumericsError::Empty);
    }
    let scale = m.as_slice().iter().fold(0.0_f64, |a, x| a.max(x.abs()));
    let mut asym = 0.0_f64;
    for i in 0..d {
        for j in (i + 1)..d {
            asym = asym.max((m.get(i, j) - m.get(j, i)).abs());
        }
    }
    if scale > 0.0 && asym / scale > 1e-9 {
        return Err(NumericsError::NotSymmetric(asym / scale));
    }

    let ones = vec![1.0 / (d as f64).sqrt(); d];
    if scale == 0.0 {
        return Ok(EigenPair {
            value: 0.0,
            vector: ones,
        });
    }
    let starts = std::iter::once(ones).chain((0..d).map(|k| {
        let mut e = vec![0.0; d];
        e[k] = 1.0;
        e
    }));
    for start in starts {
        if let Some(result) = power_from(m, start) {
            return result;
        }
    }
    // Every basis vector is in the kernel, so m is numerically zero.
    Ok(EigenPair {
        value: 0.0,
        vector: vec![1.0 / (d as f64).sqrt(); d],
    })
}

/// Runs power iteration from `v`. `None` means the start was annihilated.
fn power_from(m: &Matrix, mut v: Vec<f64>) -> Option<Result<EigenPair>> {
    let mut w = m.mul_vec(&v);
    let first_norm = norm(&w);
    if first_norm == 0.0 {
        return None;
    }
    let mut lambda = dot(&v, &w);
    let mut residual = f64::INFINITY;
    for _ in 0..POWER_MAX_ITERS {
        let wn = norm(&w);
        if wn == 0.0 {
            // Start collapsed onto the kernel after one step; eigenvalue is zero.
            return Some(Ok(EigenPair {
                value: 0.0,
                vector: v,
            }));
        }
        v.iter_mut().zip(&w).for_each(|(vi, wi)| *vi = wi / wn);
        w = m.mul_vec(&v);
        let next = dot(&v, &w);
        residual = w
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - next * b).powi(2))
            .sum::<f64>()
            .sqrt();
        let rq_close = (next - lambda).abs() <= POWER_RQ_TOL * next.abs().max(f64::MIN_POSITIVE);
        lambda = next;
        if rq_close && residual <= POWER_RESIDUAL_TOL * lambda.abs().max(1.0) {
            return Some(Ok(EigenPair { value: lambda, vector: v }));
        }
    }
    Some(Err(NumericsError::NotConverged {
        last: EigenPair { value: lambda, vector: v },
        residual,
    }))
}

/// Weighted median with the lower-median convention: the smallest value whose
/// cumulative weight reaches half the total.
pub fn weighted_median(values: &[f64], weights: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(NumericsError::Empty);
    }
    let total = check_weights(weights, values.len())?;
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut cum = 0.0;
    for &i in &order {
        cum += weights[i];
        if 2.0 * cum >= total {
            return Ok(values[i]);
        }
    }
    Ok(values[*order.last().expect("non-empty")])
}

/// Lower median with uniform weights.
pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(NumericsError::Empty);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[(sorted.len() - 1) / 2])
}

/// Error function.
///
/// Uses the everywhere-convergent series
/// `erf(x) = 2/√π · e^{-x²} · Σ (2x²)^k x / (1·3·…·(2k+1))`, whose terms are
/// all positive, so there is no cancellation. Absolute error is below 1e-15
/// for all `x`; beyond `|x| = 6` the result is `±1` to double precision.
pub fn erf(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    let ax = x.abs();
    if ax >= 6.0 {
        return x.signum();
    }
    let x2 = ax * ax;
    let mut term = ax;
    let mut sum = ax;
    let mut k = 0.0;
    loop {
        k += 1.0;
        term *= 2.0 * x2 / (2.0 * k + 1.0);
        sum += term;
        if term <= sum * 1e-17 {
            break;
        }
    }
    let v = (2.0 / std::f64::consts::PI.sqrt()) * (-x2).exp() * sum;
    v.min(1.0).copysign(x)
}

/// Standard normal CDF `Φ(z) = ½(1 + erf(z/√2))`.
pub fn std_normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + erf(z / std::f64::consts::SQRT_2))
}

/// Inverse of [`std_normal_cdf`] by bisection, absolute error below 1e-12 in
/// `z` away from the far tails.
pub fn std_normal_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(NumericsError::ProbabilityOutOfRange(p));
    }
    if p == 0.5 {
        return Ok(0.0);
    }
    let (mut lo, mut hi) = (-40.0_f64, 40.0_f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if std_normal_cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-14 {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Euclidean distance.
pub fn l2_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(NumericsError::DimensionMismatch {
            index: 1,
            expected: a.len(),
            found: b.len(),
        });
    }
    Ok(squared_distance(a, b).sqrt())
}

#[inline]
pub(crate) fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}
