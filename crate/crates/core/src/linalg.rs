//! Row-major dense matrices and the handful of kernels the model needs.
//!
//! Kernels accumulate into their output (`out += ...`) so callers can fuse
//! gradient contributions without temporaries.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
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

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(invalid(alloc::format!(
                "matrix data has {} entries, shape {}x{} needs {}",
                data.len(),
                rows,
                cols,
                rows * cols
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(invalid("ragged rows"));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
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
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.cols + j] = value;
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|x| *x = value);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(invalid("matmul inner dimensions differ"));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        matmul(
            &self.data,
            &other.data,
            &mut out.data,
            self.rows,
            self.cols,
            other.cols,
        );
        Ok(out)
    }
}

/// Dot product with four independent accumulators.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    libm::sqrt(dot(a, a))
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out(m×n) += a(m×k) · b(k×n)`
pub fn matmul(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    assert!(a.len() == m * k && b.len() == k * n && out.len() == m * n);
    gemm(m, k, n, a, (k, 1), b, (n, 1), out);
}

/// `out(k×n) += aᵀ · b` where `a` is m×k and `b` is m×n.
pub fn matmul_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    assert!(a.len() == m * k && b.len() == m * n && out.len() == k * n);
    gemm(k, m, n, a, (1, k), b, (n, 1), out);
}

/// `out(m×n) += a(m×k) · bᵀ` where `b` is n×k.
pub fn matmul_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    assert!(a.len() == m * k && b.len() == n * k && out.len() == m * n);
    gemm(m, k, n, a, (k, 1), b, (1, k), out);
}

/// `out(m×n) += A(m×k) · B(k×n)` with explicit (row, column) strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    sa: (usize, usize),
    b: &[f64],
    sb: (usize, usize),
    out: &mut [f64],
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    // SAFETY: the asserts in the callers guarantee every strided index
    // stays inside its slice, and `out` does not alias the inputs.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            1.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Numerically stable softmax of `x` written into `out`.
pub fn softmax_into(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = libm::exp(v - max);
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    softmax_into(x, &mut out);
    out
}

/// `log Σ exp(x)` without overflow.
pub fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    let sum: f64 = x.iter().map(|&v| libm::exp(v - max)).sum();
    max + libm::log(sum)
}

/// Cosine similarity with the `‖a‖·‖b‖ + eps` guard used throughout routing.
#[inline]
pub fn cosine(a: &[f64], b: &[f64], eps: f64) -> f64 {
    dot(a, b) / (norm(a) * norm(b) + eps)
}

/// Thin Householder QR of an m×n matrix (m ≥ n); returns the m×n factor `Q`
/// with columns signed so that `R` has a nonnegative diagonal.
pub fn householder_q(a: &Matrix) -> Matrix {
    let (m, n) = a.shape();
    debug_assert!(m >= n);
    let mut r = a.clone();
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(n);
    for j in 0..n {
        let mut v: Vec<f64> = (j..m).map(|i| r.get(i, j)).collect();
        let alpha = norm(&v);
        let sign = if v[0] >= 0.0 { 1.0 } else { -1.0 };
        v[0] += sign * alpha;
        let vnorm = norm(&v);
        if vnorm > 0.0 {
            for x in v.iter_mut() {
                *x /= vnorm;
            }
            for c in j..n {
                let mut proj = 0.0;
                for (t, i) in (j..m).enumerate() {
                    proj += v[t] * r.get(i, c);
                }
                for (t, i) in (j..m).enumerate() {
                    let val = r.get(i, c) - 2.0 * v[t] * proj;
                    r.set(i, c, val);
                }
            }
        }
        reflectors.push(v);
    }
    // Q = H_0 H_1 ... H_{n-1} applied to the first n columns of the identity.
    let mut q = Matrix::zeros(m, n);
    for j in 0..n {
        q.set(j, j, 1.0);
    }
    for j in (0..n).rev() {
        let v = &reflectors[j];
        for c in 0..n {
            let mut proj = 0.0;
            for (t, i) in (j..m).enumerate() {
                proj += v[t] * q.get(i, c);
            }
            for (t, i) in (j..m).enumerate() {
                let val = q.get(i, c) - 2.0 * v[t] * proj;
                q.set(i, c, val);
            }
        }
    }
    for j in 0..n {
        if r.get(j, j) < 0.0 {
            for i in 0..m {
                q.set(i, j, -q.get(i, j));
            }
        }
    }
    q
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for p in 0..a.cols() {
                    s += a.get(i, p) * b.get(p, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    fn seq(rows: usize, cols: usize, offset: f64) -> Matrix {
        let data = (0..rows * cols)
            .map(|i| ((i as f64) * 0.37 + offset).sin())
            .collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn kernels_agree_with_naive_product() {
        let a = seq(5, 7, 0.1);
        let b = seq(7, 300, 0.2);
        let expect = naive(&a, &b);
        let got = a.matmul(&b).unwrap();
        for (x, y) in expect.as_slice().iter().zip(got.as_slice()) {
            assert!((x - y).abs() < 1e-12);
        }

        // aᵀ·c with a: 5×7, c: 5×300
        let c = seq(5, 300, 0.4);
        let mut tn = Matrix::zeros(7, 300);
        matmul_tn(a.as_slice(), c.as_slice(), tn.as_mut_slice(), 5, 7, 300);
        let expect_tn = naive(&a.transpose(), &c);
        for (x, y) in expect_tn.as_slice().iter().zip(tn.as_slice()) {
            assert!((x - y).abs() < 1e-12);
        }

        // a·dᵀ with d: 6×7
        let d = seq(6, 7, 0.9);
        let mut nt = Matrix::zeros(5, 6);
        matmul_nt(a.as_slice(), d.as_slice(), nt.as_mut_slice(), 5, 7, 6);
        let expect_nt = naive(&a, &d.transpose());
        for (x, y) in expect_nt.as_slice().iter().zip(nt.as_slice()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn householder_columns_are_orthonormal() {
        let a = seq(9, 4, 0.3);
        let q = householder_q(&a);
        let qtq = q.transpose().matmul(&q).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((qtq.get(i, j) - expect).abs() < 1e-12);
            }
        }
        // Q spans the columns of A: A = Q (Qᵀ A)
        let proj = q.matmul(&q.transpose().matmul(&a).unwrap()).unwrap();
        for (x, y) in proj.as_slice().iter().zip(a.as_slice()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn log_sum_exp_handles_large_values() {
        let v = log_sum_exp(&[1000.0, 1000.0]);
        assert!((v - (1000.0 + 2f64.ln())).abs() < 1e-9);
    }
}
