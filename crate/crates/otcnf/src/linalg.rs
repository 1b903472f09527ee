//! Dense row-major `f64` matrices sized for desk-scale flow training.
//!
//! Everything in this crate moves through [`Mat`]: batches (rows = samples),
//! network weights, and autodiff tape values. Products are delegated to
//! `matrixmultiply::dgemm`, which handles arbitrary strides, so the transposed
//! product variants below cost nothing extra. Shapes are checked with
//! assertions: shape bugs are programmer errors, not recoverable conditions.

use serde::{Deserialize, Serialize};

/// Dense row-major matrix. A column vector is an `m x 1` matrix, a scalar `1 x 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Mat {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    /// Build from a flat row-major buffer. Panics if the length does not match.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "Mat::from_vec: buffer length {} != {}x{}",
            data.len(),
            rows,
            cols
        );
        Mat { rows, cols, data }
    }

    /// Column vector from a slice.
    pub fn col_vec(v: &[f64]) -> Self {
        Mat::from_vec(v.len(), 1, v.to_vec())
    }

    pub fn scalar(v: f64) -> Self {
        Mat::from_vec(1, 1, vec![v])
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

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.at(r, c)).collect()
    }

    pub fn transpose(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.set(c, r, self.at(r, c));
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self * other`.
    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows, "matmul: {}x{} * {}x{}", self.rows, self.cols, other.rows, other.cols);
        let mut out = Mat::zeros(self.rows, other.cols);
        gemm(
            self.rows, self.cols, other.cols,
            1.0,
            &self.data, self.cols as isize, 1,
            &other.data, other.cols as isize, 1,
            0.0, &mut out.data, other.cols as isize, 1,
        );
        out
    }

    /// `self^T * other` (`self` is `k x m`, `other` is `k x n`, result `m x n`).
    pub fn matmul_tn(&self, other: &Mat) -> Mat {
        assert_eq!(self.rows, other.rows, "matmul_tn: {}x{} ^T * {}x{}", self.rows, self.cols, other.rows, other.cols);
        let mut out = Mat::zeros(self.cols, other.cols);
        gemm(
            self.cols, self.rows, other.cols,
            1.0,
            &self.data, 1, self.cols as isize,
            &other.data, other.cols as isize, 1,
            0.0, &mut out.data, other.cols as isize, 1,
        );
        out
    }

    /// `self * other^T` (`self` is `m x k`, `other` is `n x k`, result `m x n`).
    pub fn matmul_nt(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.cols, "matmul_nt: {}x{} * {}x{} ^T", self.rows, self.cols, other.rows, other.cols);
        let mut out = Mat::zeros(self.rows, other.rows);
        gemm(
            self.rows, self.cols, other.rows,
            1.0,
            &self.data, self.cols as isize, 1,
            &other.data, 1, other.cols as isize,
            0.0, &mut out.data, other.rows as isize, 1,
        );
        out
    }

    /// `acc += alpha * self * other`.
    pub fn matmul_acc(&self, other: &Mat, alpha: f64, acc: &mut Mat) {
        assert_eq!(self.cols, other.rows);
        assert_eq!((acc.rows, acc.cols), (self.rows, other.cols));
        gemm(
            self.rows, self.cols, other.cols,
            alpha,
            &self.data, self.cols as isize, 1,
            &other.data, other.cols as isize, 1,
            1.0, &mut acc.data, other.cols as isize, 1,
        );
    }

    /// `acc += alpha * self^T * other`.
    pub fn matmul_tn_acc(&self, other: &Mat, alpha: f64, acc: &mut Mat) {
        assert_eq!(self.rows, other.rows);
        assert_eq!((acc.rows, acc.cols), (self.cols, other.cols));
        gemm(
            self.cols, self.rows, other.cols,
            alpha,
            &self.data, 1, self.cols as isize,
            &other.data, other.cols as isize, 1,
            1.0, &mut acc.data, other.cols as isize, 1,
        );
    }

    /// `acc += alpha * self * other^T`.
    pub fn matmul_nt_acc(&self, other: &Mat, alpha: f64, acc: &mut Mat) {
        assert_eq!(self.cols, other.cols);
        assert_eq!((acc.rows, acc.cols), (self.rows, other.rows));
        gemm(
            self.rows, self.cols, other.rows,
            alpha,
            &self.data, self.cols as isize, 1,
            &other.data, 1, other.cols as isize,
            1.0, &mut acc.data, other.rows as isize, 1,
        );
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn hadamard(&self, other: &Mat) -> Mat {
        assert_eq!(self.shape(), other.shape(), "hadamard shape mismatch");
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a * b)
            .collect();
        Mat {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }

    pub fn add(&self, other: &Mat) -> Mat {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Mat) -> Mat {
        self.zip(other, |a, b| a - b)
    }

    /// `self + alpha * other`.
    pub fn add_scaled(&self, other: &Mat, alpha: f64) -> Mat {
        self.zip(other, |a, b| a + alpha * b)
    }

    pub fn zip(&self, other: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
        assert_eq!(self.shape(), other.shape(), "zip shape mismatch");
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Mat {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }

    pub fn scale(&self, alpha: f64) -> Mat {
        self.map(|v| alpha * v)
    }

    /// `self += alpha * other`, in place.
    pub fn axpy(&mut self, alpha: f64, other: &Mat) {
        assert_eq!(self.shape(), other.shape(), "axpy shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    /// Sum over each row, giving an `m x 1` column.
    pub fn row_sums(&self) -> Mat {
        let mut out = Mat::zeros(self.rows, 1);
        for r in 0..self.rows {
            out.data[r] = self.row(r).iter().sum();
        }
        out
    }

    /// Sum over each column, giving a `1 x n` row.
    pub fn col_sums(&self) -> Mat {
        let mut out = Mat::zeros(1, self.cols);
        for r in 0..self.rows {
            for (o, &v) in out.data.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
        out
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Copy of rows `r0..r1`.
    pub fn slice_rows(&self, r0: usize, r1: usize) -> Mat {
        assert!(r0 <= r1 && r1 <= self.rows);
        Mat::from_vec(r1 - r0, self.cols, self.data[r0 * self.cols..r1 * self.cols].to_vec())
    }

    /// Copy of columns `c0..c1`.
    pub fn slice_cols(&self, c0: usize, c1: usize) -> Mat {
        assert!(c0 <= c1 && c1 <= self.cols);
        let w = c1 - c0;
        let mut out = Mat::zeros(self.rows, w);
        for r in 0..self.rows {
            out.row_mut(r).copy_from_slice(&self.row(r)[c0..c1]);
        }
        out
    }

    /// Stack `self` above `other`.
    pub fn vstack(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.cols, "vstack column mismatch");
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Mat::from_vec(self.rows + other.rows, self.cols, data)
    }

    /// Tile an `m x 1` column across `n` columns.
    pub fn broadcast_col(&self, n: usize) -> Mat {
        assert_eq!(self.cols, 1, "broadcast_col expects a column vector");
        let mut out = Mat::zeros(self.rows, n);
        for r in 0..self.rows {
            out.row_mut(r).fill(self.data[r]);
        }
        out
    }

    /// Frobenius norm squared.
    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
    rsc: isize,
    csc: isize,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c.fill(0.0);
        }
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, alpha, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), rsc,
            csc,
        );
    }
}

/// Ordinary least squares fit `y = a + b x`; returns `(a, b, r_squared)`.
///
/// `r_squared` is 1 for a perfect fit and can be negative only in degenerate
/// zero-variance cases, which are mapped to 1 when residuals are also zero.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    assert_eq!(x.len(), y.len());
    assert!(x.len() >= 2, "linear_fit needs at least two points");
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(&u, &v)| (u - mx) * (v - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = y.iter().map(|v| (v - my) * (v - my)).sum();
    let ss_res: f64 = x
        .iter()
        .zip(y)
        .map(|(&u, &v)| {
            let e = v - (intercept + slope * u);
            e * e
        })
        .sum();
    let r2 = if ss_tot == 0.0 {
        if ss_res == 0.0 {
            1.0
        } else {
            0.0
        }
    } else {
        1.0 - ss_res / ss_tot
    };
    (intercept, slope, r2)
}

/// Median of a sample (averaging the middle pair for even lengths).
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of empty slice");
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("median: non-comparable value"));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Linearly interpolated percentile, `p` in `[0, 100]`.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty());
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = (p / 100.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi.min(n - 1)] - sorted[lo])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_matches_manual() {
        let a = Mat::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Mat::from_vec(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = a.matmul(&b);
        assert_eq!(c.as_slice(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn transposed_products_agree_with_explicit_transpose() {
        let a = Mat::from_vec(3, 2, vec![1.0, -2.0, 0.5, 3.0, -1.0, 4.0]);
        let b = Mat::from_vec(3, 4, (0..12).map(|i| i as f64 * 0.3 - 1.0).collect());
        let tn = a.matmul_tn(&b);
        let explicit = a.transpose().matmul(&b);
        for (x, y) in tn.as_slice().iter().zip(explicit.as_slice()) {
            assert!((x - y).abs() < 1e-14);
        }

        let c = Mat::from_vec(4, 2, (0..8).map(|i| (i as f64).sin()).collect());
        let nt = a.matmul_nt(&c);
        let explicit = a.matmul(&c.transpose());
        for (x, y) in nt.as_slice().iter().zip(explicit.as_slice()) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn accumulating_product_adds_in_place() {
        let a = Mat::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let b = Mat::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let mut acc = Mat::filled(2, 2, 10.0);
        a.matmul_acc(&b, 2.0, &mut acc);
        assert_eq!(acc.as_slice(), &[12.0, 14.0, 16.0, 18.0]);
    }

    #[test]
    fn sums_and_slices() {
        let a = Mat::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(a.row_sums().as_slice(), &[6.0, 15.0]);
        assert_eq!(a.col_sums().as_slice(), &[5.0, 7.0, 9.0]);
        assert_eq!(a.slice_rows(1, 2).as_slice(), &[4.0, 5.0, 6.0]);
        assert_eq!(a.slice_cols(1, 3).as_slice(), &[2.0, 3.0, 5.0, 6.0]);
        assert_eq!(a.sum(), 21.0);
    }

    #[test]
    fn linear_fit_recovers_exact_line() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y: Vec<f64> = x.iter().map(|v| 2.5 - 0.5 * v).collect();
        let (a, b, r2) = linear_fit(&x, &y);
        assert!((a - 2.5).abs() < 1e-12);
        assert!((b + 0.5).abs() < 1e-12);
        assert!((r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn percentile_interpolates() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(percentile(&v, 0.0), 1.0);
        assert_eq!(percentile(&v, 100.0), 4.0);
        assert!((percentile(&v, 50.0) - 2.5).abs() < 1e-12);
        assert!((median(&v) - 2.5).abs() < 1e-12);
    }
}
