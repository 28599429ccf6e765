//! Dense row-major linear algebra used throughout the crate.
//!
//! Everything here is deterministic: loops run in a fixed order so results are
//! bit-identical across runs on one platform.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Diagonal floor added to every least-squares solve.
pub const RIDGE_FLOOR: f64 = 1e-8;

/// Refinement passes used to recover a ridge smaller than [`RIDGE_FLOOR`].
const REFINE_PASSES: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vector {
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

    /// Builds a matrix from row-major data, rejecting empty shapes and non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::invalid(format!("matrix shape {rows}x{cols} is empty")));
        }
        if data.len() != rows * cols {
            return Err(Error::dims("Matrix::from_vec", rows * cols, data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Matrix::from_vec"));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
    }

    /// Stacks equal-length column vectors side by side.
    pub fn from_columns(columns: &[Vector]) -> Result<Self> {
        let first = columns
            .first()
            .ok_or_else(|| Error::invalid("from_columns needs at least one column"))?;
        let rows = first.dim();
        if let Some(bad) = columns.iter().find(|c| c.dim() != rows) {
            return Err(Error::dims("Matrix::from_columns", rows, bad.dim()));
        }
        Ok(Matrix::from_fn(rows, columns.len(), |r, c| columns[c][r]))
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

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
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

    pub fn column(&self, c: usize) -> Vector {
        Vector::new((0..self.rows).map(|r| self.get(r, c)).collect())
    }

    pub fn set_column(&mut self, c: usize, v: &Vector) {
        for r in 0..self.rows {
            self.set(r, c, v[r]);
        }
    }

    /// Contiguous columns `start..start + len` as a new matrix.
    pub fn columns(&self, start: usize, len: usize) -> Matrix {
        Matrix::from_fn(self.rows, len, |r, c| self.get(r, start + c))
    }

    /// Row-major flattening as a vector.
    pub fn flatten(&self) -> Vector {
        Vector::new(self.data.clone())
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(Error::dims(
                "matmul",
                format!("lhs cols = rhs rows = {}", self.cols),
                format!("rhs rows {}", rhs.rows),
            ));
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let rhs_row = &rhs.data[k * rhs.cols..(k + 1) * rhs.cols];
                for (o, b) in out_row.iter_mut().zip(rhs_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self^T * rhs` without materializing the transpose.
    pub fn t_matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.rows != rhs.rows {
            return Err(Error::dims("t_matmul", self.rows, rhs.rows));
        }
        let mut out = Matrix::zeros(self.cols, rhs.cols);
        for k in 0..self.rows {
            let lhs_row = &self.data[k * self.cols..(k + 1) * self.cols];
            let rhs_row = &rhs.data[k * rhs.cols..(k + 1) * rhs.cols];
            for (i, &a) in lhs_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
                for (o, b) in out_row.iter_mut().zip(rhs_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self * rhs^T` without materializing the transpose.
    pub fn matmul_t(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.cols {
            return Err(Error::dims("matmul_t", self.cols, rhs.cols));
        }
        let mut out = Matrix::zeros(self.rows, rhs.rows);
        for i in 0..self.rows {
            let a = &self.data[i * self.cols..(i + 1) * self.cols];
            for j in 0..rhs.rows {
                let b = &rhs.data[j * rhs.cols..(j + 1) * rhs.cols];
                out.data[i * rhs.rows + j] = dot(a, b);
            }
        }
        Ok(out)
    }

    pub fn mul_vec(&self, v: &Vector) -> Result<Vector> {
        if self.cols != v.dim() {
            return Err(Error::dims("mul_vec", self.cols, v.dim()));
        }
        Ok(Vector::new(
            (0..self.rows)
                .map(|r| dot(&self.data[r * self.cols..(r + 1) * self.cols], v.as_slice()))
                .collect(),
        ))
    }

    pub fn add(&self, rhs: &Matrix) -> Result<Matrix> {
        self.zip_with(rhs, "add", |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Matrix) -> Result<Matrix> {
        self.zip_with(rhs, "sub", |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    /// `self += s * rhs`.
    pub fn axpy(&mut self, s: f64, rhs: &Matrix) -> Result<()> {
        if self.shape() != rhs.shape() {
            return Err(Error::dims("axpy", fmt_shape(self), fmt_shape(rhs)));
        }
        for (a, b) in self.data.iter_mut().zip(&rhs.data) {
            *a += s * b;
        }
        Ok(())
    }

    fn zip_with(&self, rhs: &Matrix, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != rhs.shape() {
            return Err(Error::dims(op, fmt_shape(self), fmt_shape(rhs)));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    /// Mean over columns, i.e. the average token vector.
    pub fn column_mean(&self) -> Vector {
        let mut out = vec![0.0; self.rows];
        for r in 0..self.rows {
            out[r] = self.data[r * self.cols..(r + 1) * self.cols].iter().sum::<f64>() / self.cols as f64;
        }
        Vector::new(out)
    }

    /// Copies `self` into a wider zero matrix, keeping columns left-aligned.
    pub fn pad_columns(&self, cols: usize) -> Matrix {
        debug_assert!(cols >= self.cols);
        Matrix::from_fn(self.rows, cols, |r, c| if c < self.cols { self.get(r, c) } else { 0.0 })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn frobenius_norm(&self) -> f64 {
        frobenius_norm(self)
    }
}

impl Vector {
    pub fn new(data: Vec<f64>) -> Self {
        Vector { data }
    }

    pub fn zeros(dim: usize) -> Self {
        Vector { data: vec![0.0; dim] }
    }

    pub fn basis(dim: usize, i: usize) -> Self {
        let mut v = Vector::zeros(dim);
        v.data[i] = 1.0;
        v
    }

    pub fn dim(&self) -> usize {
        self.data.len()
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

    pub fn dot(&self, rhs: &Vector) -> f64 {
        dot(&self.data, &rhs.data)
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn scale(&self, s: f64) -> Vector {
        Vector::new(self.data.iter().map(|v| v * s).collect())
    }

    pub fn add(&self, rhs: &Vector) -> Result<Vector> {
        if self.dim() != rhs.dim() {
            return Err(Error::dims("Vector::add", self.dim(), rhs.dim()));
        }
        Ok(Vector::new(self.data.iter().zip(&rhs.data).map(|(a, b)| a + b).collect()))
    }

    pub fn sub(&self, rhs: &Vector) -> Result<Vector> {
        if self.dim() != rhs.dim() {
            return Err(Error::dims("Vector::sub", self.dim(), rhs.dim()));
        }
        Ok(Vector::new(self.data.iter().zip(&rhs.data).map(|(a, b)| a - b).collect()))
    }

    /// Unit-length copy; `None` for the zero vector.
    pub fn normalized(&self) -> Option<Vector> {
        let n = self.norm();
        (n > 0.0).then(|| self.scale(1.0 / n))
    }

    pub fn cosine(&self, rhs: &Vector) -> f64 {
        let denom = self.norm() * rhs.norm();
        if denom == 0.0 {
            0.0
        } else {
            self.dot(rhs) / denom
        }
    }
}

impl std::ops::Index<usize> for Vector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.data[i]
    }
}

impl From<Vec<f64>> for Vector {
    fn from(data: Vec<f64>) -> Self {
        Vector::new(data)
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn fmt_shape(m: &Matrix) -> String {
    format!("{}x{}", m.rows, m.cols)
}

pub fn frobenius_norm(m: &Matrix) -> f64 {
    m.data.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Column-wise softmax with per-column max subtraction.
pub fn softmax_columns(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for c in 0..m.cols {
        let max = (0..m.rows).map(|r| m.get(r, c)).fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for r in 0..m.rows {
            let e = (m.get(r, c) - max).exp();
            out.set(r, c, e);
            sum += e;
        }
        for r in 0..m.rows {
            out.set(r, c, out.get(r, c) / sum);
        }
    }
    out
}

/// Minimizes `|A w - b|^2 + ridge |w|^2` through the normal equations.
///
/// The factorized system always carries at least [`RIDGE_FLOOR`] on its
/// diagonal; smaller requested ridges are reached by iterative refinement.
pub fn solve_least_squares(a: &Matrix, b: &Vector, ridge: f64) -> Result<Vector> {
    if a.rows != b.dim() {
        return Err(Error::dims("solve_least_squares", a.rows, b.dim()));
    }
    if !(ridge >= 0.0) || !ridge.is_finite() {
        return Err(Error::invalid(format!("ridge must be finite and >= 0, got {ridge}")));
    }
    let n = a.cols;
    let mut gram = a.t_matmul(a)?;
    let atb = a.t_matmul(&Matrix::from_fn(b.dim(), 1, |r, _| b[r]))?;
    let atb: Vec<f64> = atb.data;

    let floor = ridge.max(RIDGE_FLOOR);
    for i in 0..n {
        let v = gram.get(i, i);
        gram.set(i, i, v + floor);
    }
    let chol = cholesky(&gram)?;
    let mut w = cholesky_solve(&chol, &atb);

    if ridge < floor {
        // gram currently holds A^T A + floor I; refine toward A^T A + ridge I.
        let shift = floor - ridge;
        for _ in 0..REFINE_PASSES {
            let mut residual = atb.clone();
            for i in 0..n {
                let row = &gram.data[i * n..(i + 1) * n];
                residual[i] -= dot(row, &w) - shift * w[i];
            }
            let delta = cholesky_solve(&chol, &residual);
            for (wi, di) in w.iter_mut().zip(&delta) {
                *wi += di;
            }
        }
    }
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("solve_least_squares"));
    }
    Ok(Vector::new(w))
}

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
fn cholesky(m: &Matrix) -> Result<Matrix> {
    let n = m.rows;
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut s = m.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            if i == j {
                if s <= 0.0 {
                    return Err(Error::NonFinite("cholesky (matrix not positive definite)"));
                }
                l.set(i, i, s.sqrt());
            } else {
                l.set(i, j, s / l.get(j, j));
            }
        }
    }
    Ok(l)
}

fn cholesky_solve(l: &Matrix, b: &[f64]) -> Vec<f64> {
    let n = l.rows;
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l.get(i, k) * y[k];
        }
        y[i] = s / l.get(i, i);
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l.get(k, i) * x[k];
        }
        x[i] = s / l.get(i, i);
    }
    x
}

/// Concatenates matrices left to right.
pub fn concat_columns(parts: &[&Matrix]) -> Result<Matrix> {
    let first = parts
        .first()
        .ok_or_else(|| Error::invalid("concat_columns needs at least one part"))?;
    let rows = first.rows;
    if let Some(bad) = parts.iter().find(|p| p.rows != rows) {
        return Err(Error::dims("concat_columns", format!("{rows} rows"), format!("{} rows", bad.rows)));
    }
    let cols: usize = parts.iter().map(|p| p.cols).sum();
    let mut out = Matrix::zeros(rows, cols);
    let mut offset = 0;
    for p in parts {
        for r in 0..rows {
            out.data[r * cols + offset..r * cols + offset + p.cols]
                .copy_from_slice(&p.data[r * p.cols..(r + 1) * p.cols]);
        }
        offset += p.cols;
    }
    Ok(out)
}
