//! Dense row-major `f64` matrices and the norms used across the crate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{gaussian_matrix, Seed};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
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
            m.data[i * n + i] = 1.0;
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

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Matrix::zeros(n, n);
        for (i, v) in values.iter().enumerate() {
            m.data[i * n + i] = *v;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::InvalidArgument(format!(
                "matrix data length {} does not match shape {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Panics on ragged input; meant for literals in tests and fixtures.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Matrix { rows: r, cols: c, data }
    }

    pub fn row_vector(values: &[f64]) -> Self {
        Matrix {
            rows: 1,
            cols: values.len(),
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

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Returns the matrix unchanged if finite, otherwise a divergence error
    /// naming `origin`.
    pub fn ensure_finite(self, origin: &str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(Error::divergence(origin))
        }
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(Error::shape("matmul", (self.cols, rhs.cols), rhs.shape()));
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for p in 0..self.cols {
                let a = self.data[i * self.cols + p];
                if a == 0.0 {
                    continue;
                }
                let rhs_row = &rhs.data[p * rhs.cols..(p + 1) * rhs.cols];
                for (o, b) in out_row.iter_mut().zip(rhs_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    fn zip_with(&self, rhs: &Matrix, ctx: &str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != rhs.shape() {
            return Err(Error::shape(ctx, self.shape(), rhs.shape()));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(a, b)| f(*a, *b)).collect(),
        })
    }

    pub fn add(&self, rhs: &Matrix) -> Result<Matrix> {
        self.zip_with(rhs, "add", |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Matrix) -> Result<Matrix> {
        self.zip_with(rhs, "sub", |a, b| a - b)
    }

    /// `self + alpha * rhs`
    pub fn axpy(&self, alpha: f64, rhs: &Matrix) -> Result<Matrix> {
        self.zip_with(rhs, "axpy", |a, b| a + alpha * b)
    }

    pub fn scale(&self, c: f64) -> Matrix {
        self.map(|v| c * v)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| f(*v)).collect(),
        }
    }

    /// Frobenius inner product, i.e. the dot product of the row-major
    /// flattenings.
    pub fn dot(&self, rhs: &Matrix) -> Result<f64> {
        if self.shape() != rhs.shape() {
            return Err(Error::shape("dot", self.shape(), rhs.shape()));
        }
        Ok(self.data.iter().zip(&rhs.data).map(|(a, b)| a * b).sum())
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    fn column_norms(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.cols).map(move |j| {
            (0..self.rows)
                .map(|i| {
                    let v = self.data[i * self.cols + j];
                    v * v
                })
                .sum::<f64>()
                .sqrt()
        })
    }

    /// Sum of the Euclidean norms of the columns.
    pub fn norm_21(&self) -> f64 {
        self.column_norms().sum()
    }

    /// Largest Euclidean norm among the columns. The row-wise variant used by
    /// covering arguments is `m.transpose().norm_2inf()`.
    pub fn norm_2inf(&self) -> f64 {
        self.column_norms().fold(0.0, f64::max)
    }

    /// Copy of columns `start..end`.
    pub fn columns(&self, start: usize, end: usize) -> Matrix {
        let w = end - start;
        let mut out = Matrix::zeros(self.rows, w);
        for i in 0..self.rows {
            out.row_mut(i).copy_from_slice(&self.row(i)[start..end]);
        }
        out
    }

    /// Horizontal concatenation.
    pub fn hstack(parts: &[&Matrix]) -> Result<Matrix> {
        let rows = parts.first().map_or(0, |m| m.rows);
        if let Some(bad) = parts.iter().find(|m| m.rows != rows) {
            return Err(Error::shape("hstack", (rows, bad.cols), bad.shape()));
        }
        let cols = parts.iter().map(|m| m.cols).sum();
        let mut out = Matrix::zeros(rows, cols);
        for i in 0..rows {
            let mut off = 0;
            for m in parts {
                out.row_mut(i)[off..off + m.cols].copy_from_slice(m.row(i));
                off += m.cols;
            }
        }
        Ok(out)
    }

    /// Zero-pads to `rows x cols`, keeping the original in the top-left corner.
    pub fn pad(&self, rows: usize, cols: usize) -> Result<Matrix> {
        if rows < self.rows || cols < self.cols {
            return Err(Error::InvalidArgument(format!(
                "cannot pad {}x{} down to {rows}x{cols}",
                self.rows, self.cols
            )));
        }
        let mut out = Matrix::zeros(rows, cols);
        for i in 0..self.rows {
            out.row_mut(i)[..self.cols].copy_from_slice(self.row(i));
        }
        Ok(out)
    }
}

/// Settings for [`spectral_norm_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerIteration {
    pub tol: f64,
    pub max_iters: usize,
    pub seed: Seed,
}

impl Default for PowerIteration {
    fn default() -> Self {
        PowerIteration {
            tol: 1e-10,
            max_iters: 1000,
            seed: Seed::new(0x5EED_0F_9A1A, 0),
        }
    }
}

/// Largest singular value with the default settings (tol 1e-10, 1000 iterations).
pub fn spectral_norm(m: &Matrix) -> Result<f64> {
    spectral_norm_with(m, &PowerIteration::default())
}

/// Largest singular value by power iteration on `MᵀM`.
///
/// Iteration stops once the relative change of the Rayleigh quotient is below
/// `tol` and the geometric extrapolation of the remaining error (from the ratio
/// of successive changes) is below `tol` as well. A second start vector from a
/// different stream guards against a first start that is orthogonal to the
/// dominant direction.
pub fn spectral_norm_with(m: &Matrix, opts: &PowerIteration) -> Result<f64> {
    if m.is_empty() {
        return Err(Error::InvalidArgument("spectral norm of an empty matrix".into()));
    }
    if opts.tol <= 0.0 {
        return Err(Error::InvalidArgument("tol must be positive".into()));
    }
    if !m.is_finite() {
        return Err(Error::divergence("spectral_norm input"));
    }
    if m.max_abs() == 0.0 {
        return Ok(0.0);
    }
    let gram = m.transpose().matmul(m)?;
    let first = rayleigh_power(&gram, opts, opts.seed)?;
    let second = rayleigh_power(&gram, opts, opts.seed.derive(1))?;
    Ok(first.max(second).sqrt())
}

fn rayleigh_power(gram: &Matrix, opts: &PowerIteration, seed: Seed) -> Result<f64> {
    let n = gram.rows();
    let mut v = gaussian_matrix(n, 1, 1.0, &mut seed.rng());
    normalize(&mut v);
    let mut lambda = 0.0f64;
    let mut prev_change = f64::INFINITY;
    for it in 1..=opts.max_iters {
        let w = gram.matmul(&v)?;
        let next = v.dot(&w)?;
        let wn = w.frobenius();
        if wn == 0.0 {
            // v lies in the null space; restart is handled by the caller's
            // second stream.
            return Ok(0.0);
        }
        v = w.scale(1.0 / wn);
        let change = (next - lambda).abs();
        let scale = next.abs().max(f64::MIN_POSITIVE);
        lambda = next;
        if it > 1 && change <= opts.tol * scale {
            let ratio = if prev_change.is_finite() && prev_change > 0.0 {
                (change / prev_change).min(0.999_999)
            } else {
                0.0
            };
            let remaining = change * ratio / (1.0 - ratio);
            if remaining <= opts.tol * scale || change <= 4.0 * f64::EPSILON * scale {
                return Ok(lambda);
            }
        }
        prev_change = change;
    }
    Err(Error::NonConvergence {
        estimate: lambda.max(0.0).sqrt(),
        iterations: opts.max_iters,
    })
}

/// Largest eigenvalue of a symmetric matrix by cyclic Jacobi rotations.
///
/// Used where power iteration would crawl because the spectrum is clustered
/// (e.g. `I + hS` for small `h`).
pub fn symmetric_max_eigenvalue(s: &Matrix) -> Result<f64> {
    Ok(symmetric_eigenvalues(s)?
        .into_iter()
        .fold(f64::NEG_INFINITY, f64::max))
}

/// All eigenvalues of a symmetric matrix (unsorted).
pub fn symmetric_eigenvalues(s: &Matrix) -> Result<Vec<f64>> {
    let n = s.rows();
    if s.cols() != n {
        return Err(Error::shape("symmetric eigenvalues", (n, n), s.shape()));
    }
    let mut a = s.clone();
    for i in 0..n {
        for j in (i + 1)..n {
            let m = 0.5 * (a.get(i, j) + a.get(j, i));
            a.set(i, j, m);
            a.set(j, i, m);
        }
    }
    let scale = a.frobenius().max(f64::MIN_POSITIVE);
    for _sweep in 0..64 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a.get(i, j).powi(2))
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let theta = (a.get(q, q) - a.get(p, p)) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                for k in 0..n {
                    let akp = a.get(k, p);
                    let akq = a.get(k, q);
                    a.set(k, p, c * akp - sn * akq);
                    a.set(k, q, sn * akp + c * akq);
                }
                for k in 0..n {
                    let apk = a.get(p, k);
                    let aqk = a.get(q, k);
                    a.set(p, k, c * apk - sn * aqk);
                    a.set(q, k, sn * apk + c * aqk);
                }
            }
        }
    }
    Ok((0..n).map(|i| a.get(i, i)).collect())
}

fn normalize(v: &mut Matrix) {
    let n = v.frobenius();
    if n > 0.0 {
        for x in v.as_mut_slice() {
            *x /= n;
        }
    }
}
