//! Dense numeric substrate.
//!
//! [`Matrix`] is a row-major 2-D buffer. Reductions walk their inputs in a
//! fixed order and matrix products run single-threaded, so identical inputs
//! give bit-identical outputs.

pub mod dump;
pub mod rng;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scalar type used throughout the crate.
#[cfg(not(feature = "f32"))]
pub type Real = f64;
#[cfg(not(feature = "f32"))]
use matrixmultiply::dgemm as gemm_kernel;
/// Scalar type used throughout the crate.
#[cfg(feature = "f32")]
pub type Real = f32;
#[cfg(feature = "f32")]
use matrixmultiply::sgemm as gemm_kernel;

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<Real>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows.min(8) {
            writeln!(f, "  {:?}", &self.row(r)[..self.cols.min(8)])?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<Real>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                op: "Matrix::new",
                lhs: (rows, cols),
                rhs: (data.len(), 1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: Real) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> Real) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows<R: AsRef<[Real]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Shape {
                    op: "Matrix::from_rows",
                    lhs: (rows.len(), cols),
                    rhs: (1, r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn column(values: &[Real]) -> Self {
        Self {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    pub fn scalar(value: Real) -> Self {
        Self::filled(1, 1, value)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> Real {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: Real) {
        self.data[i * self.cols + j] = value;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[Real] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [Real] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[Real] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Real] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Real> {
        self.data
    }

    pub fn to_rows(&self) -> Vec<Vec<Real>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    /// The scalar held by a 1x1 matrix.
    pub fn item(&self) -> Real {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn check_finite(&self, op: &'static str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// `self · rhs`.
    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.shape(),
                rhs: rhs.shape(),
            });
        }
        let out = gemm(self, false, rhs, false);
        out.check_finite("matmul")?;
        Ok(out)
    }

    /// `self · rhsᵀ` without materialising the transpose.
    pub fn matmul_t(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.cols {
            return Err(Error::Shape {
                op: "matmul_t",
                lhs: self.shape(),
                rhs: rhs.shape(),
            });
        }
        let out = gemm(self, false, rhs, true);
        out.check_finite("matmul_t")?;
        Ok(out)
    }

    /// `selfᵀ · rhs` without materialising the transpose.
    pub fn t_matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.rows != rhs.rows {
            return Err(Error::Shape {
                op: "t_matmul",
                lhs: self.shape(),
                rhs: rhs.shape(),
            });
        }
        let out = gemm(self, true, rhs, false);
        out.check_finite("t_matmul")?;
        Ok(out)
    }

    pub fn map(&self, f: impl Fn(Real) -> Real) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_with(
        &self,
        rhs: &Matrix,
        op: &'static str,
        f: impl Fn(Real, Real) -> Real,
    ) -> Result<Matrix> {
        if self.shape() != rhs.shape() {
            return Err(Error::Shape {
                op,
                lhs: self.shape(),
                rhs: rhs.shape(),
            });
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&rhs.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, rhs: &Matrix) -> Result<Matrix> {
        self.zip_with(rhs, "add", |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Matrix) -> Result<Matrix> {
        self.zip_with(rhs, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, rhs: &Matrix) -> Result<Matrix> {
        self.zip_with(rhs, "hadamard", |a, b| a * b)
    }

    pub fn scale(&self, s: Real) -> Matrix {
        self.map(|x| x * s)
    }

    /// In-place `self += rhs`; shapes must match.
    pub fn add_assign(&mut self, rhs: &Matrix) {
        assert_eq!(self.shape(), rhs.shape(), "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&rhs.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> Real {
        self.data.iter().fold(0.0, |acc, &x| acc + x)
    }

    pub fn row_sums(&self) -> Vec<Real> {
        (0..self.rows)
            .map(|i| self.row(i).iter().fold(0.0, |acc, &x| acc + x))
            .collect()
    }

    pub fn col_sums(&self) -> Vec<Real> {
        let mut sums = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (s, &x) in sums.iter_mut().zip(self.row(i)) {
                *s += x;
            }
        }
        sums
    }

    pub fn max(&self) -> Real {
        self.data.iter().copied().fold(Real::NEG_INFINITY, Real::max)
    }

    pub fn max_abs_diff(&self, rhs: &Matrix) -> Real {
        assert_eq!(self.shape(), rhs.shape(), "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&rhs.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, Real::max)
    }

    pub fn gather_rows(&self, idx: &[usize]) -> Matrix {
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

    pub fn slice_cols(&self, start: usize, len: usize) -> Matrix {
        assert!(start + len <= self.cols, "slice_cols out of range");
        Matrix::from_fn(self.rows, len, |i, j| self.get(i, start + j))
    }

    pub fn concat_cols(parts: &[&Matrix]) -> Result<Matrix> {
        let rows = parts.first().map_or(0, |m| m.rows);
        if let Some(bad) = parts.iter().find(|m| m.rows != rows) {
            return Err(Error::Shape {
                op: "concat_cols",
                lhs: (rows, 0),
                rhs: bad.shape(),
            });
        }
        let cols = parts.iter().map(|m| m.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for m in parts {
                data.extend_from_slice(m.row(i));
            }
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Row-wise softmax of `scale · x`, max-subtracted.
    pub fn row_softmax(&self, scale: Real) -> Matrix {
        let mut out = self.clone();
        for i in 0..self.rows {
            softmax_in_place(out.row_mut(i), scale);
        }
        out
    }

    /// Row-wise `log Σ exp(x)` over unmasked entries. Fully masked rows give
    /// `-∞`; masked entries never enter the arithmetic.
    pub fn logsumexp_rows(&self, mask: Option<&Mask>) -> Vec<Real> {
        if let Some(m) = mask {
            assert_eq!(m.shape(), self.shape(), "logsumexp mask shape mismatch");
        }
        (0..self.rows)
            .map(|i| {
                let row = self.row(i);
                let keep = |j: usize| mask.map_or(true, |m| m.get(i, j));
                logsumexp_filtered(row.iter().enumerate().filter(|(j, _)| keep(*j)).map(|(_, &x)| x))
            })
            .collect()
    }
}

/// `op(a) · op(b)` through the blocked kernel, with transposes expressed as
/// strides. Single-threaded, so results depend only on the inputs.
fn gemm(a: &Matrix, ta: bool, b: &Matrix, tb: bool) -> Matrix {
    let (m, k) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let n = if tb { b.rows } else { b.cols };
    let mut out = Matrix::zeros(m, n);
    if m == 0 || n == 0 || k == 0 {
        return out;
    }
    let (rsa, csa) = if ta { (1, a.cols as isize) } else { (a.cols as isize, 1) };
    let (rsb, csb) = if tb { (1, b.cols as isize) } else { (b.cols as isize, 1) };
    // SAFETY: the strides describe exactly the row-major buffers of `a`, `b`
    // and `out`, whose sizes were checked by the callers.
    unsafe {
        gemm_kernel(
            m, k, n, 1.0, a.data.as_ptr(), rsa, csa, b.data.as_ptr(), rsb, csb, 0.0,
            out.data.as_mut_ptr(), n as isize, 1,
        );
    }
    out
}

#[inline]
pub fn dot(a: &[Real], b: &[Real]) -> Real {
    a.iter().zip(b).fold(0.0, |acc, (&x, &y)| acc + x * y)
}

#[inline]
pub fn sigmoid(x: Real) -> Real {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max-subtracted softmax of `scale · row`, written back into `row`.
pub fn softmax_in_place(row: &mut [Real], scale: Real) {
    let m = row
        .iter()
        .map(|&x| x * scale)
        .fold(Real::NEG_INFINITY, Real::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x * scale - m).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

/// `log Σ exp(x)` over an iterator; empty input gives `-∞`.
pub fn logsumexp_filtered(values: impl Iterator<Item = Real> + Clone) -> Real {
    let m = values.clone().fold(Real::NEG_INFINITY, Real::max);
    if m == Real::NEG_INFINITY {
        return Real::NEG_INFINITY;
    }
    let s = values.fold(0.0, |acc, x| acc + (x - m).exp());
    m + s.ln()
}

/// Dense boolean matrix, used for attention masks.
#[derive(Clone, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl fmt::Debug for Mask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Mask {}x{}", self.rows, self.cols)?;
        for i in 0..self.rows.min(32) {
            let line: String = (0..self.cols.min(64))
                .map(|j| if self.get(i, j) { '#' } else { '.' })
                .collect();
            writeln!(f, "  {line}")?;
        }
        Ok(())
    }
}

impl Mask {
    pub fn new(rows: usize, cols: usize, value: bool) -> Self {
        Self {
            rows,
            cols,
            bits: vec![value; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                bits.push(f(i, j));
            }
        }
        Self { rows, cols, bits }
    }

    /// Lower-triangular (`j ≤ i`) mask.
    pub fn causal(t: usize) -> Self {
        Self::from_fn(t, t, |i, j| j <= i)
    }

    pub fn identity(t: usize) -> Self {
        Self::from_fn(t, t, |i, j| i == j)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: bool) {
        self.bits[i * self.cols + j] = value;
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.bits[i * self.cols..(i + 1) * self.cols]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// All `(i, j)` with the bit set, in row-major order.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.rows {
            for j in 0..self.cols {
                if self.get(i, j) {
                    out.push((i, j));
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::rng::{normal_matrix, SeedStream};

    fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let a = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        assert_eq!(Matrix::identity(2).matmul(&a).unwrap(), a);
        let b = Matrix::from_rows(&[[0.0], [1.0]]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let streams = SeedStream::new(7);
        let a = normal_matrix(&mut streams.stream(0), 5, 7, 1.0);
        let b = normal_matrix(&mut streams.stream(1), 7, 3, 1.0);
        let fast = a.matmul(&b).unwrap();
        assert!(fast.max_abs_diff(&naive_matmul(&a, &b)) < 1e-12);
        assert!(a.matmul_t(&b.transpose()).unwrap().max_abs_diff(&fast) < 1e-12);
        assert!(a.transpose().t_matmul(&b).unwrap().max_abs_diff(&fast) < 1e-12);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Matrix::zeros(2, 3);
        assert!(matches!(a.matmul(&a), Err(Error::Shape { .. })));
    }

    #[test]
    fn matmul_overflow_is_an_error() {
        let a = Matrix::filled(1, 2, Real::MAX);
        let b = Matrix::filled(2, 1, Real::MAX);
        assert!(matches!(a.matmul(&b), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn softmax_rows() {
        let x = Matrix::from_rows(&[vec![0.0, 0.0, 0.0]]).unwrap();
        for &p in x.row_softmax(1.0).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = Matrix::from_rows(&[vec![1000.0, 0.0]]).unwrap();
        let p = x.row_softmax(1.0);
        assert!((p.get(0, 0) - 1.0).abs() < 1e-9 && p.get(0, 1).abs() < 1e-9);

        let x = Matrix::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap();
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        let p = x.row_softmax(1.0);
        for (j, v) in [1.0f64, 2.0, 3.0].iter().enumerate() {
            assert!((p.get(0, j) as f64 - v.exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn logsumexp_cases() {
        let single = Matrix::from_rows(&[vec![-3.5]]).unwrap();
        assert_eq!(single.logsumexp_rows(None), vec![-3.5]);
        let two = Matrix::from_rows(&[vec![0.0, 0.0]]).unwrap();
        assert!((two.logsumexp_rows(None)[0] - (2.0 as Real).ln()).abs() < 1e-15);
        let x = Matrix::from_rows(&[vec![3.0, 1.0, -2.0]]).unwrap();
        let direct = ((3.0f64).exp() + (1.0f64).exp() + (-2.0f64).exp()).ln();
        assert!((x.logsumexp_rows(None)[0] as f64 - direct).abs() < 1e-12);
    }

    #[test]
    fn logsumexp_masked_rows() {
        let x = Matrix::from_rows(&[vec![5.0, 1.0], vec![2.0, 7.0]]).unwrap();
        let mut m = Mask::new(2, 2, false);
        m.set(0, 1, true);
        let l = x.logsumexp_rows(Some(&m));
        assert_eq!(l[0], 1.0);
        assert_eq!(l[1], Real::NEG_INFINITY);
    }

    #[test]
    fn logsumexp_survives_large_values() {
        let x = Matrix::from_rows(&[vec![1e300, 1e300]]).unwrap();
        assert!((x.logsumexp_rows(None)[0] - 1e300).abs() / 1e300 < 1e-15);
    }
}
