//! Dense row-major matrices, stable softmax, pairwise distances and the
//! crate's reproducible random number generator.
//!
//! Every reduction here runs in a fixed sequential order so results are
//! bit-reproducible across runs and machines.

use std::fmt;

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::error::{Error, Result};

/// Row-major matrix of `f64`.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::data(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::data(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// Single-column matrix.
    pub fn column(values: &[f64]) -> Self {
        Matrix {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
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

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact panics on a zero chunk size
        let cols = self.cols.max(1);
        self.data.chunks_exact(cols).take(self.rows)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Returns a data error naming the first non-finite entry.
    pub fn check_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(p) => Err(Error::data(format!(
                "non-finite value {} at ({}, {})",
                self.data[p],
                p / self.cols.max(1),
                p % self.cols.max(1)
            ))),
        }
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.set(c, r, self.get(r, c));
            }
        }
        t
    }

    /// Gathers the listed rows, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    /// Columns `start..end` as a new matrix.
    pub fn col_slice(&self, start: usize, end: usize) -> Matrix {
        assert!(start <= end && end <= self.cols);
        let mut data = Vec::with_capacity(self.rows * (end - start));
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[start..end]);
        }
        Matrix {
            rows: self.rows,
            cols: end - start,
            data,
        }
    }

    /// Column-wise concatenation `[a, b, ...]`.
    pub fn hstack(parts: &[Matrix]) -> Result<Matrix> {
        let rows = parts.first().map_or(0, |p| p.rows);
        if parts.iter().any(|p| p.rows != rows) {
            return Err(Error::data("hstack: row counts differ"));
        }
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(r));
            }
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Row-wise concatenation.
    pub fn vstack(parts: &[Matrix]) -> Result<Matrix> {
        let cols = parts.first().map_or(0, |p| p.cols);
        if parts.iter().any(|p| p.cols != cols) {
            return Err(Error::data("vstack: column counts differ"));
        }
        let mut data = Vec::new();
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        let rows = parts.iter().map(|p| p.rows).sum();
        Ok(Matrix { rows, cols, data })
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::data(format!(
                "add: shape {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Matrix product with a fixed i-k-j accumulation order.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::data(format!(
            "matmul: {}x{} times {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let arow = a.row(i);
        let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &aik) in arow.iter().enumerate() {
            let brow = b.row(k);
            for (o, &bkj) in orow.iter_mut().zip(brow) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

/// Softmax of one row in place, with optional per-entry multipliers applied
/// to the exponentials before normalization.
///
/// With all multipliers equal to 1.0 the result is bit-identical to the plain
/// softmax since `1.0 * e == e` exactly.
pub(crate) fn softmax_in_place(row: &mut [f64], multipliers: Option<&[f64]>) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    match multipliers {
        None => {
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
        }
        Some(c) => {
            for (v, &ci) in row.iter_mut().zip(c) {
                *v = ci * (*v - max).exp();
                sum += *v;
            }
        }
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(m: &Matrix) -> Result<Matrix> {
    m.check_finite()?;
    let mut out = m.clone();
    for r in 0..out.rows {
        softmax_in_place(out.row_mut(r), None);
    }
    Ok(out)
}

/// `out[i][j] = ||a_i - b_j||^2`.
pub fn pairwise_sq_dists(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::data(format!(
            "pairwise distances: dimension {} vs {}",
            a.cols, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        for j in 0..b.rows {
            out.set(i, j, sq_dist(a.row(i), b.row(j)));
        }
    }
    Ok(out)
}

/// Seedable generator used throughout the crate.
///
/// The algorithm is xoshiro256++ whose 256-bit state is filled from the
/// 64-bit seed by SplitMix64 (`Xoshiro256PlusPlus::seed_from_u64`).
/// Derived quantities:
///
/// * `uniform()` = `(next_u64() >> 11) * 2^-53`, in `[0, 1)`.
/// * `normal()` = Box-Muller cosine branch
///   `sqrt(-2 ln(1 - u1)) * cos(2 pi u2)` on two fresh uniforms; the sine
///   branch is discarded so every normal consumes exactly two words.
#[derive(Clone, Debug)]
pub struct Rng {
    inner: Xoshiro256PlusPlus,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            inner: Xoshiro256PlusPlus::seed_from_u64(seed),
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Independent generator for a sub-task.
    pub fn fork(&mut self) -> Rng {
        Rng::new(self.next_u64())
    }
}

/// Draws `k` distinct indices from `0..n`.
///
/// Each draw picks among the remaining indices with probability proportional
/// to `probs` (uniform when absent), then removes the drawn index and
/// renormalizes. The returned order is the draw order.
pub fn sample_without_replacement(
    rng: &mut Rng,
    n: usize,
    k: usize,
    probs: Option<&[f64]>,
) -> Result<Vec<usize>> {
    if k > n {
        return Err(Error::usage(format!(
            "cannot draw {k} items from {n} without replacement"
        )));
    }
    let mut mass: Vec<f64> = match probs {
        Some(p) => {
            if p.len() != n {
                return Err(Error::data(format!(
                    "expected {n} probabilities, got {}",
                    p.len()
                )));
            }
            if let Some(bad) = p.iter().position(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::data(format!(
                    "probability {bad} is negative or non-finite"
                )));
            }
            p.to_vec()
        }
        None => vec![1.0; n],
    };
    if k > 0 && mass.iter().sum::<f64>() <= 0.0 {
        return Err(Error::data("probabilities sum to zero"));
    }

    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let total: f64 = mass.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.uniform() * total;
            let mut acc = 0.0;
            let mut chosen = None;
            let mut last_positive = None;
            for (i, &m) in mass.iter().enumerate() {
                if m <= 0.0 {
                    continue;
                }
                last_positive = Some(i);
                acc += m;
                if target < acc {
                    chosen = Some(i);
                    break;
                }
            }
            // rounding can leave target == acc at the end
            chosen.or(last_positive).expect("positive mass exists")
        } else {
            // remaining items all have zero mass; take them uniformly
            let zeros: Vec<usize> = (0..n).filter(|i| !out.contains(i)).collect();
            zeros[(rng.uniform() * zeros.len() as f64) as usize]
        };
        mass[pick] = 0.0;
        out.push(pick);
    }
    Ok(out)
}
