//! Row-major dense matrices of `f64`.
//!
//! Every reduction walks its operands in a fixed order (row by row, left to
//! right inside a row), so two runs over the same inputs produce the same
//! bits. Public operations check their output for NaN/Inf and report a
//! [`ZslError::NonFinite`] instead of letting it propagate.

use serde::{Deserialize, Serialize};

use crate::error::{Result, ZslError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(ZslError::Dimension {
                op: "Matrix::new",
                left: (rows, cols),
                right: (data.len(), 1),
            });
        }
        Matrix { rows, cols, data }.checked("Matrix::new")
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(ZslError::Dimension {
                    op: "Matrix::from_rows",
                    left: (i, r.len()),
                    right: (0, cols),
                });
            }
            data.extend_from_slice(r);
        }
        Matrix::new(rows.len(), cols, data)
    }

    /// A single-row matrix.
    pub fn row_vector(values: &[f64]) -> Result<Self> {
        Matrix::new(1, values.len(), values.to_vec())
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
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics, and a zero-column matrix has no data anyway
        self.data
            .chunks(self.cols.max(1))
            .take(if self.cols == 0 { 0 } else { self.rows })
    }

    /// Gathers the listed rows, in order, into a new matrix.
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

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn checked(self, op: &'static str) -> Result<Self> {
        if self.all_finite() {
            Ok(self)
        } else {
            Err(ZslError::NonFinite { op })
        }
    }

    fn same_shape(&self, other: &Matrix, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(ZslError::Dimension {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(())
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(ZslError::Dimension {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        // i-k-j loop: every output cell accumulates over k in ascending order
        for i in 0..self.rows {
            let a_row = self.row(i);
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in a_row.iter().enumerate() {
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out.checked("matmul")
    }

    /// `self · otherᵀ` without materializing the transpose.
    pub fn matmul_nt(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(ZslError::Dimension {
                op: "matmul_nt",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a_row = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(a_row, other.row(j));
            }
        }
        out.checked("matmul_nt")
    }

    /// `selfᵀ · other` without materializing the transpose.
    pub fn matmul_tn(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(ZslError::Dimension {
                op: "matmul_tn",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let a_row = self.row(k);
            let b_row = other.row(k);
            for (i, &a) in a_row.iter().enumerate() {
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out.checked("matmul_tn")
    }

    /// Softmax of every row, shifted by the row maximum before exponentiation.
    pub fn rowwise_softmax(&self) -> Result<Matrix> {
        if self.is_empty() {
            return Err(ZslError::Dimension {
                op: "rowwise_softmax",
                left: self.shape(),
                right: (1, 1),
            });
        }
        let mut out = self.clone();
        for r in 0..out.rows {
            softmax_in_place(out.row_mut(r));
        }
        out.checked("rowwise_softmax")
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    pub fn scale(&self, factor: f64) -> Result<Matrix> {
        self.map(|v| v * factor).checked("scale")
    }

    /// In-place `self += factor · other`.
    pub fn add_scaled_assign(&mut self, other: &Matrix, factor: f64) -> Result<()> {
        self.same_shape(other, "add_scaled_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += factor * b;
        }
        if self.all_finite() {
            Ok(())
        } else {
            Err(ZslError::NonFinite {
                op: "add_scaled_assign",
            })
        }
    }

    /// Adds a `1 × cols` row to every row.
    pub fn add_row_broadcast(&self, row: &Matrix) -> Result<Matrix> {
        if row.rows != 1 || row.cols != self.cols {
            return Err(ZslError::Dimension {
                op: "add_row_broadcast",
                left: self.shape(),
                right: row.shape(),
            });
        }
        let mut out = self.clone();
        for r in 0..out.rows {
            for (o, &b) in out.row_mut(r).iter_mut().zip(&row.data) {
                *o += b;
            }
        }
        out.checked("add_row_broadcast")
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip_with(&self, other: &Matrix, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        self.same_shape(other, op)?;
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
        .checked(op)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Sum of all rows, as a `1 × cols` matrix.
    pub fn sum_rows(&self) -> Result<Matrix> {
        let mut out = Matrix::zeros(1, self.cols);
        for r in 0..self.rows {
            for (o, &v) in out.data.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
        out.checked("sum_rows")
    }

    pub fn sum_all(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Σ xᵢ².
    pub fn l2_norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// `log Σ exp(vᵢ)`, stabilized by the maximum.
pub fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
#[allow(clippy::needless_range_loop, clippy::excessive_precision)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Matrix::new(rows, cols, data).unwrap()
    }

    fn naive_product(a: &Matrix, b: &Matrix) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; b.cols()]; a.rows()];
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                for k in 0..a.cols() {
                    out[i][j] += a.get(i, k) * b.get(k, j);
                }
            }
        }
        out
    }

    #[test]
    fn matmul_identity_cases() {
        let a = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        assert_eq!(a.matmul(&Matrix::identity(2)).unwrap(), a);
        let col = Matrix::from_rows(&[[5.0], [7.0]]).unwrap();
        assert_eq!(Matrix::identity(2).matmul(&col).unwrap(), col);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random(&mut rng, 7, 5);
        let b = random(&mut rng, 5, 3);
        let got = a.matmul(&b).unwrap();
        let want = naive_product(&a, &b);
        for i in 0..7 {
            for j in 0..3 {
                assert!((got.get(i, j) - want[i][j]).abs() < 1e-12);
            }
        }
        let nt = a.matmul_nt(&b.transpose()).unwrap();
        let tn = a.transpose().matmul_tn(&b).unwrap();
        for i in 0..7 {
            for j in 0..3 {
                assert!((nt.get(i, j) - want[i][j]).abs() < 1e-12);
                assert!((tn.get(i, j) - want[i][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = Matrix::zeros(2, 3).matmul(&Matrix::zeros(2, 3)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(2, 3)"), "{msg}");
        match err {
            ZslError::Dimension { left, right, .. } => {
                assert_eq!(left, (2, 3));
                assert_eq!(right, (2, 3));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn softmax_examples() {
        let s = Matrix::from_rows(&[[0.0, 0.0, 0.0]]).unwrap().rowwise_softmax().unwrap();
        for &v in s.as_slice() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = Matrix::from_rows(&[[1000.0, 0.0]]).unwrap().rowwise_softmax().unwrap();
        assert!((s.get(0, 0) - 1.0).abs() < 1e-12);
        assert!(s.get(0, 1).abs() < 1e-12);

        // mpmath (40 digits) reference values for softmax([1, 2, 3])
        let want = [
            0.090_030_573_170_380_457_998_02,
            0.244_728_471_054_797_652_473,
            0.665_240_955_774_821_889_529,
        ];
        let s = Matrix::from_rows(&[[1.0, 2.0, 3.0]]).unwrap().rowwise_softmax().unwrap();
        for (g, w) in s.as_slice().iter().zip(want) {
            assert!((g - w).abs() < 1e-15, "{g} vs {w}");
        }
    }

    #[test]
    fn softmax_rejects_empty() {
        assert!(Matrix::zeros(0, 0).rowwise_softmax().is_err());
    }

    #[test]
    fn elementwise_examples() {
        assert_eq!(Matrix::from_rows(&[[3.0, 4.0]]).unwrap().l2_norm_sq(), 25.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&mut rng, 4, 6);
        assert_eq!(a.transpose().transpose(), a);
        assert_eq!(a.hadamard(&Matrix::filled(4, 6, 1.0)).unwrap(), a);
        assert!(a.add(&Matrix::zeros(6, 4)).is_err());
        assert!(a.sub(&Matrix::zeros(4, 5)).is_err());
        assert!(a.hadamard(&Matrix::zeros(3, 6)).is_err());
        let s = a.sum_rows().unwrap();
        for c in 0..6 {
            let col: f64 = (0..4).map(|r| a.get(r, c)).sum();
            assert_eq!(s.get(0, c), col);
        }
    }

    #[test]
    fn non_finite_is_reported() {
        assert!(Matrix::new(1, 1, vec![f64::NAN]).is_err());
        let big = Matrix::filled(1, 1, 1e308);
        assert!(matches!(big.scale(10.0), Err(ZslError::NonFinite { .. })));
        assert!(big.add(&big).is_err());
    }

    #[test]
    fn new_checks_length() {
        assert!(Matrix::new(2, 2, vec![1.0; 3]).is_err());
    }

    #[test]
    fn matmul_chain_is_associative() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let a = random(&mut rng, 10, 10);
            let b = random(&mut rng, 10, 10);
            let c = random(&mut rng, 10, 10);
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            let scale = left.l2_norm_sq().sqrt();
            for (x, y) in left.as_slice().iter().zip(right.as_slice()) {
                assert!((x - y).abs() <= 1e-9 * scale.max(1.0));
            }
        }
    }

    proptest! {
        #[test]
        fn product_transpose_identity(seed in any::<u64>(), n in 1usize..8, m in 1usize..8, p in 1usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random(&mut rng, n, m);
            let b = random(&mut rng, m, p);
            let lhs = a.matmul(&b).unwrap().transpose();
            let rhs = b.transpose().matmul(&a.transpose()).unwrap();
            for (x, y) in lhs.as_slice().iter().zip(rhs.as_slice()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn softmax_rows_sum_to_one(values in proptest::collection::vec(-50.0f64..50.0, 1..40), width in 1usize..8) {
            let rows = values.len() / width;
            prop_assume!(rows > 0);
            let m = Matrix::new(rows, width, values[..rows * width].to_vec()).unwrap();
            let s = m.rowwise_softmax().unwrap();
            for r in s.row_iter() {
                prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}
