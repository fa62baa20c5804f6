use serde::{Deserialize, Serialize};

use crate::real::Real;
use crate::{AutogradError, Result};

/// Dense row-major matrix. Vectors are `1 x n` rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn full(rows: usize, cols: usize, value: T) -> Self {
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(AutogradError::Shape(format!(
                "buffer of length {} cannot hold a {rows}x{cols} tensor",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn row_vector(data: Vec<T>) -> Self {
        Self { rows: 1, cols: data.len(), data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// Stacks equal-width rows into a matrix.
    pub fn from_rows(rows: &[&[T]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(AutogradError::Shape("ragged rows".into()));
            }
            data.extend_from_slice(r);
        }
        Ok(Self { rows: rows.len(), cols, data })
    }

    pub fn one_hot(cols: usize, index: usize) -> Self {
        let mut t = Self::zeros(1, cols);
        t.data[index] = T::one();
        t
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

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        let c = self.cols;
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn scalar(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::from_f64_lossy(v.to_f64_lossy())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        debug_assert_eq!(self.shape(), other.shape());
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: T, other: &Self) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + alpha * b;
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn add_row_assign(&mut self, row: &[T]) {
        debug_assert_eq!(row.len(), self.cols);
        for r in self.data.chunks_mut(self.cols.max(1)) {
            for (a, &b) in r.iter_mut().zip(row) {
                *a = *a + b;
            }
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Self {
        let c = self.cols;
        Self { rows: len, cols: c, data: self.data[start * c..(start + len) * c].to_vec() }
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Self {
        Self::from_fn(self.rows, len, |r, c| self.get(r, start + c))
    }

    pub fn append_rows(&mut self, other: &Self) {
        if self.rows == 0 {
            self.cols = other.cols;
        }
        debug_assert_eq!(self.cols, other.cols);
        self.data.extend_from_slice(&other.data);
        self.rows += other.rows;
    }

    /// Index of the largest entry in row `r`; ties resolve to the lowest index.
    pub fn argmax_row(&self, r: usize) -> usize {
        argmax(self.row(r))
    }
}

pub fn argmax<T: Real>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// `a (m x k) * b (k x n)`.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    assert_eq!(a.cols, b.rows, "matmul inner dimension");
    let mut c = Tensor::zeros(a.rows, b.cols);
    gemm_into(a, false, b, false, T::one(), T::zero(), &mut c);
    c
}

/// `a (m x k) * b^T` where `b` is `n x k`.
pub fn matmul_nt<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    assert_eq!(a.cols, b.cols, "matmul_nt inner dimension");
    let mut c = Tensor::zeros(a.rows, b.rows);
    gemm_into(a, false, b, true, T::one(), T::zero(), &mut c);
    c
}

/// `a^T * b` where `a` is `k x m`, `b` is `k x n`.
pub fn matmul_tn<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    assert_eq!(a.rows, b.rows, "matmul_tn inner dimension");
    let mut c = Tensor::zeros(a.cols, b.cols);
    gemm_into(a, true, b, false, T::one(), T::zero(), &mut c);
    c
}

/// `c = alpha * op(a) * op(b) + beta * c`.
pub fn gemm_into<T: Real>(
    a: &Tensor<T>,
    ta: bool,
    b: &Tensor<T>,
    tb: bool,
    alpha: T,
    beta: T,
    c: &mut Tensor<T>,
) {
    let (m, k) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (kb, n) = if tb { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert_eq!(k, kb, "gemm inner dimension");
    assert_eq!(c.shape(), (m, n), "gemm output shape");
    if k == 0 {
        for v in c.data.iter_mut() {
            *v = beta * *v;
        }
        return;
    }
    let (rsa, csa) = if ta { (1, a.cols as isize) } else { (a.cols as isize, 1) };
    let (rsb, csb) = if tb { (1, b.cols as isize) } else { (b.cols as isize, 1) };
    let rsc = c.cols as isize;
    T::gemm(m, k, n, alpha, &a.data, rsa, csa, &b.data, rsb, csb, beta, &mut c.data, rsc, 1);
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Row-wise layer norm. Returns the output plus per-row `(mean, 1/std)`.
pub fn layer_norm_rows<T: Real>(
    x: &Tensor<T>,
    gain: &[T],
    bias: &[T],
) -> (Tensor<T>, Vec<(T, T)>) {
    let d = x.cols;
    let inv_d = T::one() / T::from_usize(d).unwrap();
    let eps = T::from_f64_lossy(LAYER_NORM_EPS);
    let mut out = Tensor::zeros(x.rows, d);
    let mut stats = Vec::with_capacity(x.rows);
    for r in 0..x.rows {
        let row = x.row(r);
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rstd = T::one() / (var + eps).sqrt();
        let o = out.row_mut(r);
        for j in 0..d {
            o[j] = (row[j] - mean) * rstd * gain[j] + bias[j];
        }
        stats.push((mean, rstd));
    }
    (out, stats)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu<T: Real>(x: T) -> T {
    let c = T::from_f64_lossy(GELU_C);
    let a = T::from_f64_lossy(GELU_A);
    let half = T::from_f64_lossy(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

pub fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::from_f64_lossy(GELU_C);
    let a = T::from_f64_lossy(GELU_A);
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let u = c * (x + a * x * x * x);
    let th = u.tanh();
    let du = c * (T::one() + three * a * x * x);
    half * (T::one() + th) + half * x * (T::one() - th * th) * du
}

/// Number of leading columns row `r` may see under a causal mask aligned
/// to the bottom-right corner (so a `1 x n` query sees all `n` keys).
#[inline]
pub fn causal_width(r: usize, rows: usize, cols: usize) -> usize {
    (r + 1 + cols - rows).min(cols)
}

/// Row-wise softmax; with `causal`, masked entries are exactly zero.
pub fn softmax_rows<T: Real>(x: &Tensor<T>, causal: bool) -> Tensor<T> {
    let mut out = Tensor::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        let w = if causal { causal_width(r, x.rows, x.cols) } else { x.cols };
        let row = &x.row(r)[..w];
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let o = out.row_mut(r);
        let mut s = T::zero();
        for j in 0..w {
            let e = (row[j] - m).exp();
            o[j] = e;
            s = s + e;
        }
        let inv = T::one() / s;
        for v in o[..w].iter_mut() {
            *v = *v * inv;
        }
    }
    out
}

pub fn log_softmax_rows<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = Tensor::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        let row = x.row(r);
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
        for (o, &v) in out.row_mut(r).iter_mut().zip(row) {
            *o = v - lse;
        }
    }
    out
}

pub fn log_softmax<T: Real>(v: &[T]) -> Vec<T> {
    log_softmax_rows(&Tensor::row_vector(v.to_vec())).into_data()
}

pub fn softmax<T: Real>(v: &[T]) -> Vec<T> {
    softmax_rows(&Tensor::row_vector(v.to_vec()), false).into_data()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree_with_naive() {
        let a = Tensor::<f64>::from_fn(3, 4, |r, c| (r * 4 + c) as f64 * 0.1 - 0.5);
        let b = Tensor::<f64>::from_fn(4, 2, |r, c| (r as f64 - c as f64) * 0.3);
        let naive = Tensor::from_fn(3, 2, |r, c| (0..4).map(|k| a.get(r, k) * b.get(k, c)).sum());
        assert_eq!(matmul(&a, &b), naive);
        let bt = b.transpose();
        let nt = matmul_nt(&a, &bt);
        let tn = matmul_tn(&a.transpose(), &b);
        for i in 0..6 {
            assert!((nt.data()[i] - naive.data()[i]).abs() < 1e-12);
            assert!((tn.data()[i] - naive.data()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn causal_softmax_masks_future() {
        let x = Tensor::<f64>::from_fn(3, 3, |r, c| (r + c) as f64);
        let p = softmax_rows(&x, true);
        assert_eq!(p.get(0, 1), 0.0);
        assert_eq!(p.get(0, 0), 1.0);
        assert_eq!(p.get(1, 2), 0.0);
        for r in 0..3 {
            assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        // A single query row sees every key.
        let q = Tensor::<f64>::from_fn(1, 3, |_, c| c as f64);
        assert!(softmax_rows(&q, true).row(0).iter().all(|&v| v > 0.0));
    }

    #[test]
    fn gelu_grad_matches_difference_quotient() {
        for &x in &[-2.0f64, -0.3, 0.0, 0.7, 3.1] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
