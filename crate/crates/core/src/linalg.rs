//! Small dense linear algebra in `f64`.
//!
//! [`Matrix`] is row-major. Token matrices elsewhere in the crate store one
//! token per row, so the mathematical `d x M` column-per-token matrix is the
//! transpose of the backing storage.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMatrix")]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Deserialize)]
struct RawMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<RawMatrix> for Matrix {
    type Error = Error;

    fn try_from(raw: RawMatrix) -> Result<Self> {
        Matrix::new(raw.rows, raw.cols, raw.data)
    }
}

impl Matrix {
    /// Builds a matrix from row-major entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::invalid(format!("matrix must be non-empty, got {rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("Matrix::new"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::invalid("ragged rows"));
        }
        Self::new(r, c, rows.concat())
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self::new(rows, cols, data)
    }

    /// # Panics
    /// Panics if either dimension is zero.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix must be non-empty");
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        m.data.fill(value);
        m
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
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

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
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

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// `self * other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(self.mismatch("matmul", other));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        out.check_finite("matmul")
    }

    /// `self * other^T`.
    pub fn matmul_nt(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(self.mismatch("matmul_nt", other));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(self.row(i), other.row(j));
            }
        }
        out.check_finite("matmul_nt")
    }

    /// `self^T * other`.
    pub fn matmul_tn(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(self.mismatch("matmul_tn", other));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let b = other.row(k);
            for (i, &a) in self.row(k).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &bv) in out_row.iter_mut().zip(b) {
                    *o += a * bv;
                }
            }
        }
        out.check_finite("matmul_tn")
    }

    /// `self * v` for a column vector `v`.
    pub fn mul_vec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(Error::ShapeMismatch {
                op: "mul_vec",
                left: self.shape(),
                right: (v.len(), 1),
            });
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), v)).collect())
    }

    /// `self^T * v`.
    pub fn tmul_vec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.rows {
            return Err(Error::ShapeMismatch {
                op: "tmul_vec",
                left: self.shape(),
                right: (v.len(), 1),
            });
        }
        let mut out = vec![0.0; self.cols];
        for (i, &s) in v.iter().enumerate() {
            axpy(&mut out, s, self.row(i));
        }
        Ok(out)
    }

    pub fn scaled(&self, s: f64) -> Matrix {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|x| *x *= s);
        out
    }

    /// `self += s * other`.
    pub fn add_scaled(&mut self, s: f64, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(self.mismatch("add_scaled", other));
        }
        axpy(&mut self.data, s, &other.data);
        Ok(())
    }

    pub fn fill(&mut self, v: f64) {
        self.data.fill(v);
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Sum of absolute entries.
    pub fn entrywise_l1(&self) -> f64 {
        self.data.iter().map(|x| x.abs()).sum()
    }

    /// Max over rows of the row l1 norm (the (1,inf) norm).
    pub fn one_inf_norm(&self) -> f64 {
        (0..self.rows)
            .map(|i| self.row(i).iter().map(|x| x.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub(crate) fn check_finite(self, op: &'static str) -> Result<Matrix> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite(op))
        }
    }

    fn mismatch(&self, op: &'static str, other: &Matrix) -> Error {
        Error::ShapeMismatch { op, left: self.shape(), right: other.shape() }
    }
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    a.matmul(b)
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += a * x`.
#[inline]
pub fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Max-stabilized softmax over `logits[k]` where `mask[k]` is true.
/// Masked entries get probability zero. All-masked input yields all zeros.
pub fn softmax_masked(logits: &[f64], mask: Option<&[bool]>) -> Vec<f64> {
    let keep = |k: usize| mask.is_none_or(|m| m[k]);
    let max = logits
        .iter()
        .enumerate()
        .filter(|(k, _)| keep(*k))
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return vec![0.0; logits.len()];
    }
    let mut out: Vec<f64> = logits
        .iter()
        .enumerate()
        .map(|(k, &v)| if keep(k) { (v - max).exp() } else { 0.0 })
        .collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|x| *x /= total);
    out
}

/// `log(sum(exp(x)))`, stabilized.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Softmax of each row.
pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for i in 0..m.rows() {
        let p = softmax_masked(m.row(i), None);
        out.row_mut(i).copy_from_slice(&p);
    }
    out
}

/// Softmax of each column.
pub fn softmax_cols(m: &Matrix) -> Matrix {
    softmax_rows(&m.transpose()).transpose()
}

/// `sum(a ⊙ b)`.
pub fn hadamard_sum(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(a.mismatch("hadamard_sum", b));
    }
    Ok(dot(a.as_slice(), b.as_slice()))
}

/// The row-constant matrix `1 r^T` nearest to `A` in Frobenius norm, and its residual.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankOneFit {
    /// Every row equals `r`, the column-wise mean of `A`.
    pub approx: Matrix,
    pub residual_frobenius: f64,
    /// Max over rows of the row l1 norm of `A - R`.
    pub residual_one_inf: f64,
}

pub fn row_constant_rank_one(a: &Matrix) -> RankOneFit {
    let (m, n) = a.shape();
    let mut r = vec![0.0; n];
    for i in 0..m {
        axpy(&mut r, 1.0, a.row(i));
    }
    r.iter_mut().for_each(|x| *x /= m as f64);
    let mut approx = Matrix::zeros(m, n);
    let mut diff = a.clone();
    for i in 0..m {
        approx.row_mut(i).copy_from_slice(&r);
        axpy(diff.row_mut(i), -1.0, &r);
    }
    // Rows that are bitwise identical give an exactly zero residual; the mean
    // above can round, so snap those columns.
    for j in 0..n {
        let first = a.get(0, j);
        if (1..m).all(|i| a.get(i, j) == first) {
            for i in 0..m {
                approx.set(i, j, first);
                diff.set(i, j, 0.0);
            }
        }
    }
    RankOneFit {
        approx,
        residual_frobenius: diff.frobenius_norm(),
        residual_one_inf: diff.one_inf_norm(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn naive(a: &Matrix, b: &Matrix) -> Matrix {
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
    fn matmul_examples() {
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(Matrix::identity(2).matmul(&a).unwrap(), a);
        let v = m(&[&[0.0], &[1.0]]);
        let prod = a.matmul(&v).unwrap();
        assert_eq!(prod, m(&[&[2.0], &[4.0]]));
        assert_eq!(prod, naive(&a, &v));
        let z = Matrix::zeros(2, 2).matmul(&m(&[&[5.0, -1.0, 3.0], &[2.0, 2.0, 7.0]])).unwrap();
        assert!(z.as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn matmul_reports_both_shapes() {
        let err = Matrix::zeros(2, 3).matmul(&Matrix::zeros(2, 3)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn rejects_non_finite_and_empty() {
        assert!(Matrix::new(1, 1, vec![f64::NAN]).is_err());
        assert!(Matrix::new(0, 1, vec![]).is_err());
        assert!(Matrix::new(2, 2, vec![1.0]).is_err());
    }

    #[test]
    fn softmax_examples() {
        let p = softmax_rows(&Matrix::zeros(1, 3));
        assert_eq!(p.row(0), &[1.0 / 3.0; 3]);
        let p = softmax_rows(&m(&[&[0.0, 2f64.ln()]]));
        assert!((p.get(0, 0) - 1.0 / 3.0).abs() < 1e-15);
        assert!((p.get(0, 1) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_large_logits_match_log_space_oracle() {
        let p = softmax_rows(&m(&[&[1000.0, 0.0]]));
        // log-space oracle: log p_k = x_k - logsumexp(x)
        let lse = 1000.0 + (1.0 + (-1000f64).exp()).ln();
        let oracle = [(1000.0 - lse).exp(), (0.0 - lse).exp()];
        assert_eq!(p.get(0, 0), oracle[0]);
        assert!((p.get(0, 1) - oracle[1]).abs() < 1e-300);
        assert!(p.is_finite());
    }

    #[test]
    fn masked_softmax_zeroes_masked_entries() {
        let p = softmax_masked(&[1.0, 5.0, 1.0], Some(&[true, false, true]));
        assert_eq!(p, vec![0.5, 0.0, 0.5]);
        assert_eq!(softmax_masked(&[1.0], Some(&[false])), vec![0.0]);
    }

    #[test]
    fn hadamard_examples() {
        let ones = Matrix::filled(2, 2, 1.0);
        assert_eq!(hadamard_sum(&Matrix::identity(2), &ones).unwrap(), 2.0);
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = m(&[&[0.0, 1.0], &[1.0, 0.0]]);
        let mut oracle = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                oracle += a.get(i, j) * b.get(i, j);
            }
        }
        assert_eq!(hadamard_sum(&a, &b).unwrap(), oracle);
        assert_eq!(oracle, 5.0);
        assert_eq!(hadamard_sum(&a, &Matrix::zeros(2, 2)).unwrap(), 0.0);
        assert!(hadamard_sum(&a, &Matrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn rank_one_examples() {
        let same = m(&[&[0.2, 0.3, 0.5], &[0.2, 0.3, 0.5], &[0.2, 0.3, 0.5]]);
        let fit = row_constant_rank_one(&same);
        assert_eq!(fit.residual_frobenius, 0.0);
        assert_eq!(fit.residual_one_inf, 0.0);

        let uniform = Matrix::filled(4, 3, 1.0 / 3.0);
        assert_eq!(row_constant_rank_one(&uniform).residual_frobenius, 0.0);

        let fit = row_constant_rank_one(&Matrix::identity(2));
        assert_eq!(fit.approx, Matrix::filled(2, 2, 0.5));
        // mean-subtraction oracle: every entry deviates by 0.5
        let oracle = (4.0f64 * 0.25).sqrt();
        assert!((fit.residual_frobenius - oracle).abs() < 1e-15);
        assert!((fit.residual_one_inf - 1.0).abs() < 1e-15);
    }

    fn arb_matrix(max: usize) -> impl Strategy<Value = Matrix> {
        (1..=max, 1..=max).prop_flat_map(|(r, c)| {
            proptest::collection::vec(-10.0f64..10.0, r * c)
                .prop_map(move |data| Matrix::new(r, c, data).unwrap())
        })
    }

    proptest! {
        #[test]
        fn softmax_rows_are_distributions(a in arb_matrix(8)) {
            let p = softmax_rows(&a);
            for i in 0..p.rows() {
                let s: f64 = p.row(i).iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
                prop_assert!(p.row(i).iter().all(|&x| (0.0..=1.0).contains(&x)));
            }
        }

        #[test]
        fn hadamard_is_symmetric((a, b) in (1usize..8, 1usize..8).prop_flat_map(|(r, c)| (
            proptest::collection::vec(-10.0f64..10.0, r * c).prop_map(move |d| Matrix::new(r, c, d).unwrap()),
            proptest::collection::vec(-10.0f64..10.0, r * c).prop_map(move |d| Matrix::new(r, c, d).unwrap()),
        ))) {
            prop_assert_eq!(hadamard_sum(&a, &b).unwrap(), hadamard_sum(&b, &a).unwrap());
        }

        #[test]
        fn matmul_matches_triple_loop((a, b) in (1usize..=8, 1usize..=8, 1usize..=8).prop_flat_map(|(r, k, c)| (
            proptest::collection::vec(-10.0f64..10.0, r * k).prop_map(move |d| Matrix::new(r, k, d).unwrap()),
            proptest::collection::vec(-10.0f64..10.0, k * c).prop_map(move |d| Matrix::new(k, c, d).unwrap()),
        ))) {
            let fast = a.matmul(&b).unwrap();
            let slow = naive(&a, &b);
            for (x, y) in fast.as_slice().iter().zip(slow.as_slice()) {
                prop_assert!((x - y).abs() <= 1e-12 * y.abs().max(1.0));
            }
            let nt = a.matmul_nt(&b.transpose()).unwrap();
            let tn = a.transpose().matmul_tn(&b).unwrap();
            for ((x, y), z) in nt.as_slice().iter().zip(slow.as_slice()).zip(tn.as_slice()) {
                prop_assert!((x - y).abs() <= 1e-12 * y.abs().max(1.0));
                prop_assert!((z - y).abs() <= 1e-12 * y.abs().max(1.0));
            }
        }

        #[test]
        fn column_mean_beats_other_row_constants(a in arb_matrix(6), seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let fit = row_constant_rank_one(&a);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..100 {
                let mut other = fit.approx.clone();
                let bump: Vec<f64> = (0..a.cols()).map(|_| rng.random_range(-1.0..1.0)).collect();
                for i in 0..a.rows() {
                    axpy(other.row_mut(i), 1.0, &bump);
                }
                let mut diff = a.clone();
                diff.add_scaled(-1.0, &other).unwrap();
                prop_assert!(fit.residual_frobenius <= diff.frobenius_norm() + 1e-12);
            }
        }
    }
}
