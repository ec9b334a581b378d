//! Dense row-major `f64` matrices and a seeded random source.
//!
//! This is deliberately small: only the products, reductions and
//! entry-wise maps the attention, block and gradient code needs. Every
//! operation returns a fresh [`Matrix`]; values are never mutated in place
//! through the public API.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{LmecError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Mul,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(LmecError::DataLength {
                rows,
                cols,
                len: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub(crate) fn from_parts(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 1.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self::from_parts(rows, cols, vec![value; rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self::from_parts(rows, cols, data)
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(LmecError::shape("from_rows", (0, cols), (i, r.len())));
            }
            data.extend_from_slice(r);
        }
        Ok(Self::from_parts(rows.len(), cols, data))
    }

    /// A `1 × n` matrix.
    pub fn row_vector(values: &[f64]) -> Self {
        Self::from_parts(1, values.len(), values.to_vec())
    }

    /// An `n × 1` matrix.
    pub fn column_vector(values: &[f64]) -> Self {
        Self::from_parts(values.len(), 1, values.to_vec())
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

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub(crate) fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols;
        &mut self.data[i * c..(i + 1) * c]
    }

    /// Copy of `self` with a single entry replaced.
    pub fn with_entry(&self, i: usize, j: usize, value: f64) -> Matrix {
        let mut out = self.clone();
        out.data[i * self.cols + j] = value;
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = vec![0.0; self.data.len()];
        for i in 0..self.rows {
            for (j, &v) in self.row(i).iter().enumerate() {
                out[j * self.rows + i] = v;
            }
        }
        Matrix::from_parts(self.cols, self.rows, out)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix::from_parts(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    /// Entry-wise combination of two equally shaped matrices.
    pub fn elementwise(&self, other: &Matrix, op: ElementwiseOp) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(LmecError::shape("elementwise", self.shape(), other.shape()));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| match op {
                ElementwiseOp::Add => a + b,
                ElementwiseOp::Mul => a * b,
            })
            .collect();
        Ok(Matrix::from_parts(self.rows, self.cols, data))
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.elementwise(other, ElementwiseOp::Add)
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.elementwise(other, ElementwiseOp::Mul)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(LmecError::shape("sub", self.shape(), other.shape()));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Matrix::from_parts(self.rows, self.cols, data))
    }

    /// Multiplies every row entry-wise by the `1 × cols` vector `v`.
    pub fn broadcast_row_mul(&self, v: &Matrix) -> Result<Matrix> {
        self.broadcast_row(v, "broadcast_row_mul", |a, b| a * b)
    }

    /// Adds the `1 × cols` vector `v` to every row.
    pub fn broadcast_row_add(&self, v: &Matrix) -> Result<Matrix> {
        self.broadcast_row(v, "broadcast_row_add", |a, b| a + b)
    }

    fn broadcast_row(
        &self,
        v: &Matrix,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Matrix> {
        if v.rows != 1 || v.cols != self.cols {
            return Err(LmecError::shape(op, self.shape(), v.shape()));
        }
        let mut out = self.clone();
        for i in 0..self.rows {
            for (o, &b) in out.row_mut(i).iter_mut().zip(&v.data) {
                *o = f(*o, b);
            }
        }
        Ok(out)
    }

    /// Multiplies row `i` by `weights[i]`.
    pub fn scale_rows(&self, weights: &[f64]) -> Result<Matrix> {
        if weights.len() != self.rows {
            return Err(LmecError::shape(
                "scale_rows",
                self.shape(),
                (weights.len(), 1),
            ));
        }
        let mut out = self.clone();
        for (i, &w) in weights.iter().enumerate() {
            out.row_mut(i).iter_mut().for_each(|v| *v *= w);
        }
        Ok(out)
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(LmecError::shape("matmul", self.shape(), other.shape()));
        }
        let n = other.cols;
        let mut out = vec![0.0; self.rows * n];
        for (i, out_row) in out.chunks_exact_mut(n.max(1)).enumerate().take(self.rows) {
            for (k, &a) in self.row(i).iter().enumerate() {
                let b_row = other.row(k);
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Matrix::from_parts(self.rows, n, out))
    }

    /// `self · otherᵀ` without the caller materializing the transpose.
    pub fn matmul_transpose_b(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(LmecError::shape(
                "matmul_transpose_b",
                self.shape(),
                other.shape(),
            ));
        }
        self.matmul(&other.transpose())
    }

    /// `selfᵀ · other`, accumulated as a sum of row outer products.
    pub fn matmul_transpose_a(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(LmecError::shape(
                "matmul_transpose_a",
                self.shape(),
                other.shape(),
            ));
        }
        let n = other.cols;
        let mut out = vec![0.0; self.cols * n];
        for r in 0..self.rows {
            let b_row = other.row(r);
            for (a_idx, &a) in self.row(r).iter().enumerate() {
                let out_row = &mut out[a_idx * n..(a_idx + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Matrix::from_parts(self.cols, n, out))
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&self) -> Matrix {
        let mut out = self.clone();
        for i in 0..self.rows {
            let row = out.row_mut(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v /= sum);
        }
        out
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows).map(|i| self.row(i).iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (o, &v) in out.iter_mut().zip(self.row(i)) {
                *o += v;
            }
        }
        out
    }

    /// Columns `start..end` as a new matrix.
    pub fn column_block(&self, start: usize, end: usize) -> Matrix {
        assert!(start <= end && end <= self.cols, "column block out of range");
        let w = end - start;
        let mut data = Vec::with_capacity(self.rows * w);
        for i in 0..self.rows {
            data.extend_from_slice(&self.row(i)[start..end]);
        }
        Matrix::from_parts(self.rows, w, data)
    }

    /// First `n` rows as a new matrix.
    pub fn top_rows(&self, n: usize) -> Matrix {
        assert!(n <= self.rows, "row range out of bounds");
        Matrix::from_parts(n, self.cols, self.data[..n * self.cols].to_vec())
    }

    /// Row `order[i]` of `self` becomes row `i` of the result.
    pub fn select_rows(&self, order: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(order.len() * self.cols);
        for &r in order {
            data.extend_from_slice(self.row(r));
        }
        Matrix::from_parts(order.len(), self.cols, data)
    }

    /// Side-by-side concatenation of equal-height blocks.
    pub fn hstack(blocks: &[Matrix]) -> Result<Matrix> {
        let rows = blocks.first().map_or(0, |b| b.rows);
        let cols = blocks.iter().map(|b| b.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for b in blocks {
            if b.rows != rows {
                return Err(LmecError::shape("hstack", (rows, 0), b.shape()));
            }
        }
        for i in 0..rows {
            for b in blocks {
                data.extend_from_slice(b.row(i));
            }
        }
        Ok(Matrix::from_parts(rows, cols, data))
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> Result<f64> {
        if self.shape() != other.shape() {
            return Err(LmecError::shape("max_abs_diff", self.shape(), other.shape()));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    /// `‖self − reference‖∞ / ‖reference‖∞`, with an absolute fallback
    /// when the reference is identically zero.
    pub fn relative_error(&self, reference: &Matrix) -> Result<f64> {
        let diff = self.max_abs_diff(reference)?;
        let scale = reference.max_abs();
        Ok(if scale > 0.0 { diff / scale } else { diff })
    }
}

/// Deterministic random source backed by a counter-mode ChaCha stream.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Position in the underlying keystream, in 32-bit words.
    pub fn counter(&self) -> u128 {
        self.inner.get_word_pos()
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random()
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.inner.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn uniform_matrix(&mut self, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| self.uniform(lo, hi))
    }

    pub fn normal_matrix(&mut self, rows: usize, cols: usize, std: f64) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| std * self.normal())
    }

    /// Fisher-Yates permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.below(i + 1);
            p.swap(i, j);
        }
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use crate::numerics::Rng;

    fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
        Matrix::from_fn(a.rows(), b.cols(), |i, j| {
            (0..a.cols()).map(|k| a.get(i, k) * b.get(k, j)).sum()
        })
    }

    #[test]
    fn identity_product_is_noop() {
        let a = Rng::new(1).normal_matrix(3, 3, 1.0);
        assert_eq!(Matrix::identity(3).matmul(&a).unwrap(), a);
    }

    #[test]
    fn hand_computed_product() {
        let a = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[[5.0], [6.0]]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), (2, 1));
        assert_eq!(c.as_slice(), &[17.0, 39.0]);
    }

    #[test]
    fn product_matches_triple_loop() {
        let mut rng = Rng::new(7);
        let a = rng.normal_matrix(7, 5, 1.0);
        let b = rng.normal_matrix(5, 3, 1.0);
        let fast = a.matmul(&b).unwrap();
        let slow = naive_matmul(&a, &b);
        for (x, y) in fast.as_slice().iter().zip(slow.as_slice()) {
            assert!((x - y).abs() / y.abs().max(1e-300) < 1e-12);
        }
        assert!(a.matmul_transpose_a(&b).is_err());
        let via_ta = a.transpose().matmul_transpose_a(&b).unwrap();
        assert!(via_ta.max_abs_diff(&slow).unwrap() < 1e-12);
        let via_tb = a.matmul_transpose_b(&b.transpose()).unwrap();
        assert!(via_tb.max_abs_diff(&slow).unwrap() < 1e-12);
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let err = Matrix::zeros(2, 3).matmul(&Matrix::zeros(2, 3)).unwrap_err();
        assert!(matches!(
            err,
            LmecError::Shape {
                left: (2, 3),
                right: (2, 3),
                ..
            }
        ));
    }

    #[test]
    fn new_checks_length() {
        assert!(Matrix::new(2, 2, vec![1.0; 3]).is_err());
        assert!(Matrix::new(2, 2, vec![1.0; 4]).is_ok());
    }

    #[test]
    fn softmax_examples() {
        let m = Matrix::from_rows(&[
            vec![0.0, 0.0, 0.0],
            vec![1000.0, 0.0, 0.0],
            vec![1.0, 2.0, 3.0],
        ])
        .unwrap();
        let s = m.softmax_rows();
        for j in 0..3 {
            assert_abs_diff_eq!(s.get(0, j), 1.0 / 3.0, epsilon = 1e-15);
        }
        assert_abs_diff_eq!(s.get(1, 0), 1.0, epsilon = 1e-15);
        assert!(s.get(1, 1) < 1e-300 && s.is_finite());
        // e^x / Σe^x evaluated directly
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        let expected = [1f64.exp() / z, 2f64.exp() / z, 3f64.exp() / z];
        for j in 0..3 {
            assert_abs_diff_eq!(s.get(2, j), expected[j], epsilon = 1e-15);
        }
        assert_abs_diff_eq!(s.get(2, 0), 0.09003057, epsilon = 1e-8);
        assert_abs_diff_eq!(s.get(2, 1), 0.24472847, epsilon = 1e-8);
        assert_abs_diff_eq!(s.get(2, 2), 0.66524096, epsilon = 1e-8);
    }

    #[test]
    fn elementwise_and_broadcast() {
        let a = Rng::new(3).normal_matrix(6, 6, 1.0);
        let b = Rng::new(4).normal_matrix(6, 6, 1.0);
        assert_eq!(a.hadamard(&Matrix::ones(6, 6)).unwrap(), a);
        assert_eq!(a.hadamard(&b).unwrap(), b.hadamard(&a).unwrap());
        assert!(a.hadamard(&Matrix::ones(6, 5)).is_err());

        let m = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let v = Matrix::row_vector(&[10.0, 100.0]);
        let r = m.broadcast_row_mul(&v).unwrap();
        assert_eq!(r.as_slice(), &[10.0, 200.0, 30.0, 400.0]);
        assert!(m.broadcast_row_mul(&Matrix::row_vector(&[1.0])).is_err());
    }

    #[test]
    fn rng_is_reproducible() {
        let a = Rng::new(42).normal_matrix(4, 4, 1.0);
        let b = Rng::new(42).normal_matrix(4, 4, 1.0);
        let c = Rng::new(43).normal_matrix(4, 4, 1.0);
        assert_eq!(a.as_slice(), b.as_slice());
        assert_ne!(a.as_slice(), c.as_slice());
        let mut r = Rng::new(0);
        let before = r.counter();
        r.next_u64();
        assert!(r.counter() > before);
    }

    #[test]
    fn block_and_stack_helpers() {
        let a = Matrix::from_fn(3, 4, |i, j| (i * 4 + j) as f64);
        let left = a.column_block(0, 1);
        let right = a.column_block(1, 4);
        assert_eq!(Matrix::hstack(&[left, right]).unwrap(), a);
        assert_eq!(a.top_rows(2).shape(), (2, 4));
        assert_eq!(a.select_rows(&[2, 0]).row(0), a.row(2));
        assert_eq!(a.col_sums(), vec![12.0, 15.0, 18.0, 21.0]);
    }

    proptest! {
        #[test]
        fn matmul_is_associative(seed in any::<u64>(), m in 1usize..8, k in 1usize..8, n in 1usize..8, p in 1usize..8) {
            let mut rng = Rng::new(seed);
            let a = rng.uniform_matrix(m, k, -1.0, 1.0);
            let b = rng.uniform_matrix(k, n, -1.0, 1.0);
            let c = rng.uniform_matrix(n, p, -1.0, 1.0);
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            prop_assert!(left.relative_error(&right).unwrap() < 1e-10);
        }

        #[test]
        fn softmax_rows_are_distributions(seed in any::<u64>(), r in 1usize..6, c in 1usize..9) {
            let m = Rng::new(seed).normal_matrix(r, c, 30.0);
            let s = m.softmax_rows();
            for i in 0..r {
                let sum: f64 = s.row(i).iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-12);
                prop_assert!(s.row(i).iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }
}
