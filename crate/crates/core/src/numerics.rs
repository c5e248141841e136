//! Dense row-major `f64` matrices and the handful of products the network needs.
//!
//! Rows are the unit of work: a weight matrix stores one filter per row and a
//! mini-batch stores one sample per row, so the kernels below are written as
//! row dot products and row `axpy`s.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Wraps external row-major data. Rejects a wrong length and non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape("Matrix::from_vec", format!("{} entries for a {rows}x{cols} matrix", data.len())));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite entry at flat index {pos}")));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::shape(
                    "Matrix::from_rows",
                    format!("row {i} has {} entries, expected {cols}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Matrix::from_vec(rows.len(), cols, data)
    }

    /// Internal constructor for values produced by computation (may hold NaN after a blow-up).
    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Matrix { rows, cols, data }
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

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact panics on a zero chunk size
        let cols = self.cols.max(1);
        self.data.chunks_exact(cols).take(self.rows)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
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

    /// Copies the listed rows, in order, into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix::from_raw(indices.len(), self.cols, data)
    }

    pub fn scaled(&self, s: f64) -> Matrix {
        Matrix::from_raw(self.rows, self.cols, self.data.iter().map(|v| v * s).collect())
    }

    /// `self += s * other`.
    pub fn add_scaled(&mut self, s: f64, other: &Matrix) -> Result<()> {
        self.check_same_shape("Matrix::add_scaled", other)?;
        axpy(s, &other.data, &mut self.data);
        Ok(())
    }

    pub fn frobenius_norm(&self) -> f64 {
        math::sqrt(dot(&self.data, &self.data))
    }

    /// Largest absolute entrywise difference; `f64::INFINITY` for mismatched shapes.
    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        if self.shape() != other.shape() {
            return f64::INFINITY;
        }
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn check_same_shape(&self, op: &'static str, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(op, format!("{}x{} vs {}x{}", self.rows, self.cols, other.rows, other.cols)));
        }
        Ok(())
    }
}

/// Dot product with four independent accumulators so the loop vectorizes.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let chunks = n / 4;
    for c in 0..chunks {
        let k = c * 4;
        acc[0] += a[k] * b[k];
        acc[1] += a[k + 1] * b[k + 1];
        acc[2] += a[k + 2] * b[k + 2];
        acc[3] += a[k + 3] * b[k + 3];
    }
    let mut tail = 0.0;
    for k in chunks * 4..n {
        tail += a[k] * b[k];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `y += s * x`.
#[inline]
pub fn axpy(s: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += s * xi;
    }
}

/// `a * b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::shape("matmul", format!("{}x{} times {}x{}", a.rows, a.cols, b.rows, b.cols)));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &aik) in a.row(i).iter().enumerate() {
            if aik != 0.0 {
                axpy(aik, b.row(k), out_row);
            }
        }
    }
    Ok(out)
}

/// `a * bᵀ`, i.e. every row of `a` dotted with every row of `b`.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::shape("matmul_nt", format!("{}x{} times ({}x{})ᵀ", a.rows, a.cols, b.rows, b.cols)));
    }
    let mut out = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let ai = a.row(i);
        for j in 0..b.rows {
            out.data[i * b.rows + j] = dot(ai, b.row(j));
        }
    }
    Ok(out)
}

/// `aᵀ * b`, accumulated as a sum of outer products of matching rows.
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(Error::shape("matmul_tn", format!("({}x{})ᵀ times {}x{}", a.rows, a.cols, b.rows, b.cols)));
    }
    let mut out = Matrix::zeros(a.cols, b.cols);
    for k in 0..a.rows {
        let bk = b.row(k);
        for (i, &aki) in a.row(k).iter().enumerate() {
            if aki != 0.0 {
                axpy(aki, bk, &mut out.data[i * b.cols..(i + 1) * b.cols]);
            }
        }
    }
    Ok(out)
}

/// Euclidean norm of every row; the square roots of `diag(A Aᵀ)`.
pub fn row_l2_norms(a: &Matrix) -> Vec<f64> {
    a.row_iter().map(|r| math::sqrt(dot(r, r))).collect()
}

/// `Diag(alpha) * a` without building the diagonal matrix.
pub fn diag_scale_rows(alpha: &[f64], a: &Matrix) -> Result<Matrix> {
    if alpha.len() != a.rows {
        return Err(Error::shape("diag_scale_rows", format!("{} scales for {} rows", alpha.len(), a.rows)));
    }
    let mut out = a.clone();
    for (i, &s) in alpha.iter().enumerate() {
        out.row_mut(i).iter_mut().for_each(|v| *v *= s);
    }
    Ok(out)
}


#[cfg(test)]
mod tests {
    use super::testutil::gaussian;
    use super::*;
    use crate::seeded_rng;
    use rand::Rng as _;

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
    fn matmul_identity_and_dot() {
        let m = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        assert_eq!(matmul(&Matrix::identity(2), &m).unwrap(), m);
        let a = Matrix::from_rows(&[[1.0, 2.0]]).unwrap();
        let b = Matrix::from_rows(&[[3.0], [4.0]]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().as_slice(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = seeded_rng(1, 0);
        let a = gaussian(5, 7, &mut rng);
        let b = gaussian(7, 3, &mut rng);
        let oracle = naive_matmul(&a, &b);
        assert!(matmul(&a, &b).unwrap().max_abs_diff(&oracle) <= 1e-12);
        assert!(matmul_nt(&a, &b.transpose()).unwrap().max_abs_diff(&oracle) <= 1e-12);
        assert!(matmul_tn(&a.transpose(), &b).unwrap().max_abs_diff(&oracle) <= 1e-12);
    }

    #[test]
    fn matmul_shape_errors() {
        let a = Matrix::zeros(2, 3);
        assert!(matches!(matmul(&a, &a), Err(Error::Shape { .. })));
        assert!(matches!(matmul_nt(&a, &Matrix::zeros(2, 2)), Err(Error::Shape { .. })));
        assert!(matches!(matmul_tn(&a, &Matrix::zeros(3, 3)), Err(Error::Shape { .. })));
    }

    #[test]
    fn from_vec_rejects_bad_input() {
        assert!(Matrix::from_vec(2, 2, vec![0.0; 3]).is_err());
        assert!(matches!(Matrix::from_vec(1, 2, vec![0.0, f64::NAN]), Err(Error::Data(_))));
        assert!(Matrix::from_vec(1, 1, vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn row_norms() {
        let m = Matrix::from_rows(&[[3.0, 4.0], [0.0, 0.0]]).unwrap();
        assert_eq!(row_l2_norms(&m), vec![5.0, 0.0]);

        let mut rng = seeded_rng(2, 0);
        let a = gaussian(4, 6, &mut rng);
        let norms = row_l2_norms(&a);
        for (i, n) in norms.iter().enumerate() {
            let oracle = libm::sqrt((0..6).map(|j| a.get(i, j).powi(2)).sum::<f64>());
            assert!((n - oracle).abs() <= 1e-14);
        }
    }

    #[test]
    fn diag_scaling() {
        let a = Matrix::from_rows(&[[1.0, 1.0]]).unwrap();
        assert_eq!(diag_scale_rows(&[2.0], &a).unwrap().as_slice(), &[2.0, 2.0]);
        assert!(diag_scale_rows(&[1.0, 2.0], &a).is_err());

        let mut rng = seeded_rng(3, 0);
        let a = gaussian(4, 5, &mut rng);
        assert_eq!(diag_scale_rows(&[1.0; 4], &a).unwrap(), a);
        let alpha: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mut d = Matrix::zeros(4, 4);
        for (i, &s) in alpha.iter().enumerate() {
            d.set(i, i, s);
        }
        let oracle = naive_matmul(&d, &a);
        assert!(diag_scale_rows(&alpha, &a).unwrap().max_abs_diff(&oracle) <= 1e-14);
    }

    #[test]
    fn select_rows_and_transpose() {
        let m = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]).unwrap();
        assert_eq!(m.select_rows(&[2, 0]).as_slice(), &[5.0, 6.0, 1.0, 2.0]);
        assert_eq!(m.transpose().as_slice(), &[1.0, 3.0, 5.0, 2.0, 4.0, 6.0]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn matmul_is_associative(seed in any::<u64>(), n in 1usize..6, k in 1usize..6, p in 1usize..6, q in 1usize..6) {
                let mut rng = seeded_rng(seed, 0);
                let (a, b, c) = (gaussian(n, k, &mut rng), gaussian(k, p, &mut rng), gaussian(p, q, &mut rng));
                let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
                let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
                let scale = left.frobenius_norm().max(1.0);
                prop_assert!(left.max_abs_diff(&right) <= 1e-10 * scale);
            }

            #[test]
            fn scaling_scales_row_norms(seed in any::<u64>(), rows in 1usize..8, cols in 1usize..8) {
                let mut rng = seeded_rng(seed, 0);
                let a = gaussian(rows, cols, &mut rng);
                let alpha: Vec<f64> = (0..rows).map(|_| rng.random_range(-5.0..5.0)).collect();
                let scaled = row_l2_norms(&diag_scale_rows(&alpha, &a).unwrap());
                for ((s, n), al) in scaled.iter().zip(row_l2_norms(&a)).zip(&alpha) {
                    prop_assert!((s - al.abs() * n).abs() <= 1e-12 * (1.0 + s.abs()));
                }
            }
        }
    }
}
