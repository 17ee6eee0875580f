//! Dense row-major 2-D tensors and the small set of kernels built on them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{gemm, MatRef, Scalar};

/// Row-major `rows x cols` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor2<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Tensor2<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor2 { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::InvalidArgument(format!(
                "{} values cannot fill a {rows}x{cols} tensor",
                data.len()
            )));
        }
        Ok(Tensor2 { rows, cols, data })
    }

    /// Builds a tensor from nested rows; all rows must have equal length.
    pub fn from_rows(rows: &[&[T]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidArgument("ragged rows".into()));
        }
        Ok(Tensor2 {
            rows: rows.len(),
            cols,
            data: rows.iter().flat_map(|r| r.iter().copied()).collect(),
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub(crate) fn view(&self) -> MatRef<'_, T> {
        MatRef::new(&self.data, self.rows, self.cols)
    }

    fn check_same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch { op, left: self.shape(), right: other.shape() });
        }
        Ok(())
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: T, other: &Self) -> Result<()> {
        self.check_same_shape(other, "axpy")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "hadamard", |a, b| a * b)
    }

    pub fn scale(&self, alpha: T) -> Self {
        self.map(|v| v * alpha)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor2 { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.check_same_shape(other, op)?;
        Ok(Tensor2 {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn sum_sq(&self) -> T {
        self.data.iter().map(|&v| v * v).sum()
    }
}

/// Standard matrix product `a * b`.
pub fn matmul<T: Scalar>(a: &Tensor2<T>, b: &Tensor2<T>) -> Result<Tensor2<T>> {
    if a.cols != b.rows {
        return Err(Error::ShapeMismatch { op: "matmul", left: a.shape(), right: b.shape() });
    }
    let mut out = Tensor2::zeros(a.rows, b.cols);
    gemm(T::one(), a.view(), b.view(), T::zero(), &mut out.data);
    Ok(out)
}

/// Entrywise norm order used when comparing parameter tensors.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormOrder {
    L1,
    /// Frobenius norm.
    #[default]
    L2,
}

impl NormOrder {
    pub fn from_p(p: u32) -> Result<Self> {
        match p {
            1 => Ok(NormOrder::L1),
            2 => Ok(NormOrder::L2),
            other => Err(Error::InvalidArgument(format!("norm order must be 1 or 2, got {other}"))),
        }
    }

    pub fn p(self) -> u32 {
        match self {
            NormOrder::L1 => 1,
            NormOrder::L2 => 2,
        }
    }
}

/// `||a - b||_p` taken entrywise.
pub fn p_norm_diff<T: Scalar>(a: &Tensor2<T>, b: &Tensor2<T>, p: NormOrder) -> Result<T> {
    a.check_same_shape(b, "p_norm_diff")?;
    let diffs = a.data.iter().zip(&b.data).map(|(&x, &y)| x - y);
    Ok(match p {
        NormOrder::L1 => diffs.map(|d| d.abs()).sum(),
        NormOrder::L2 => {
            // Scaled accumulation keeps huge or tiny entries from overflowing.
            let scale = a.data.iter().zip(&b.data).map(|(&x, &y)| (x - y).abs()).fold(T::zero(), T::max);
            if scale == T::zero() {
                T::zero()
            } else {
                let s: T = diffs.map(|d| (d / scale) * (d / scale)).sum();
                scale * s.sqrt()
            }
        }
    })
}

/// Numerically stable softmax of a non-empty finite vector.
pub fn softmax<T: Scalar>(v: &[T]) -> Result<Vec<T>> {
    if v.is_empty() {
        return Err(Error::InvalidArgument("softmax of an empty vector".into()));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("softmax input".into()));
    }
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

/// Max-shifted softmax over a row, in place. Input is assumed finite.
pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let (_, total) = exp_shifted_in_place(row);
    let inv = total.recip();
    for x in row.iter_mut() {
        *x *= inv;
    }
}

/// Overwrites `row` with `exp(x - max)` and returns `(max, sum)`, so that
/// `log(sum(exp(original))) = max + ln(sum)`.
pub(crate) fn exp_shifted_in_place<T: Scalar>(row: &mut [T]) -> (T, T) {
    let max = lanewise(row, T::neg_infinity(), T::max);
    row.iter_mut().for_each(|x| *x -= max);
    T::exp_in_place(row);
    (max, lanewise(row, T::zero(), |a, b| a + b))
}

/// Folds with eight independent accumulators, combined pairwise at the
/// end. The fixed association order keeps results reproducible while
/// letting the compiler use vector registers.
fn lanewise<T: Scalar>(xs: &[T], init: T, f: impl Fn(T, T) -> T) -> T {
    let mut acc = [init; 8];
    let chunks = xs.chunks_exact(8);
    let tail = chunks.remainder();
    for c in chunks {
        for (a, &x) in acc.iter_mut().zip(c) {
            *a = f(*a, x);
        }
    }
    for (a, &x) in acc.iter_mut().zip(tail) {
        *a = f(*a, x);
    }
    let q = [f(acc[0], acc[4]), f(acc[1], acc[5]), f(acc[2], acc[6]), f(acc[3], acc[7])];
    f(f(q[0], q[2]), f(q[1], q[3]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor2<f64> {
        Tensor2::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let a = t(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(matmul(&Tensor2::identity(2), &a).unwrap(), a);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = t(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = t(&[&[5.0, 6.0], &[7.0, 8.0]]);
        assert_eq!(matmul(&a, &b).unwrap(), t(&[&[19.0, 22.0], &[43.0, 50.0]]));
    }

    #[test]
    fn matmul_dimension_mismatch_names_shapes() {
        let a = Tensor2::<f64>::zeros(2, 3);
        let b = Tensor2::<f64>::zeros(2, 2);
        let err = matmul(&a, &b).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { left: (2, 3), right: (2, 2), .. }));
        assert!(err.to_string().contains("(2, 3)"));
    }

    #[test]
    fn softmax_cases() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        let s = softmax(&[0.0, 3f64.ln()]).unwrap();
        assert!((s[0] - 0.25).abs() < 1e-15 && (s[1] - 0.75).abs() < 1e-15);
        assert_eq!(softmax(&[1000.0, 1000.0]).unwrap(), vec![0.5, 0.5]);
        assert!(softmax::<f64>(&[]).is_err());
        assert!(matches!(softmax(&[0.0, f64::NAN]), Err(Error::NonFinite(_))));
        assert!(softmax(&[f64::INFINITY]).is_err());
    }

    #[test]
    fn p_norm_cases() {
        let a = t(&[&[3.0, 4.0]]);
        let z = Tensor2::zeros(1, 2);
        assert_eq!(p_norm_diff(&a, &a, NormOrder::L2).unwrap(), 0.0);
        assert_eq!(p_norm_diff(&a, &z, NormOrder::L2).unwrap(), 5.0);
        assert_eq!(p_norm_diff(&t(&[&[1.0, -2.0]]), &z, NormOrder::L1).unwrap(), 3.0);
        assert!(p_norm_diff(&a, &Tensor2::zeros(2, 1), NormOrder::L1).is_err());
    }

    #[test]
    fn norm_order_from_p() {
        assert_eq!(NormOrder::from_p(1).unwrap(), NormOrder::L1);
        assert_eq!(NormOrder::from_p(2).unwrap().p(), 2);
        assert!(NormOrder::from_p(3).is_err());
    }

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor2::<f64>::from_vec(2, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn generic_over_f32() {
        let a = Tensor2::<f32>::from_rows(&[&[3.0, 4.0]]).unwrap();
        let n = p_norm_diff(&a, &Tensor2::zeros(1, 2), NormOrder::L2).unwrap();
        assert_eq!(n, 5.0f32);
    }
}
