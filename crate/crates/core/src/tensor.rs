//! Dense row-major matrices.
//!
//! Every value in the crate is two-dimensional: scalars are `1×1`, vectors are
//! `1×n` or `n×1`. Keeping a single rank avoids broadcasting rules entirely.

use std::fmt;

/// Dense `rows × cols` matrix of 64-bit floats stored row-major.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor from a row-major buffer.
    ///
    /// Panics if `data.len() != rows * cols`; callers constructing tensors from
    /// external input should check the length first.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "tensor buffer length {} does not match shape {}x{}",
            data.len(),
            rows,
            cols
        );
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 1.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_vec(1, 1, vec![value])
    }

    pub fn row_vector(values: Vec<f64>) -> Self {
        let n = values.len();
        Self::from_vec(1, n, values)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a tensor from nested rows; all rows must share a length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self::from_vec(rows.len(), cols, data)
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
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
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

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Value of a `1×1` tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.len(), 1);
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_vec(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Self {
        debug_assert_eq!(self.shape(), other.shape());
        Self::from_vec(
            self.rows,
            self.cols,
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        )
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

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        debug_assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Dense product `op(self) · op(rhs)` where `op` optionally transposes.
    pub fn matmul_t(&self, rhs: &Tensor, trans_self: bool, trans_rhs: bool) -> Tensor {
        let (m, k) = if trans_self {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        };
        let (k2, n) = if trans_rhs {
            (rhs.cols, rhs.rows)
        } else {
            (rhs.rows, rhs.cols)
        };
        assert_eq!(k, k2, "inner dimensions differ");
        let mut out = Tensor::zeros(m, n);
        if m == 0 || n == 0 || k == 0 {
            return out;
        }
        // Strides (row, col) of the logical operands.
        let (rsa, csa) = if trans_self {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        };
        let (rsb, csb) = if trans_rhs {
            (1, rhs.cols as isize)
        } else {
            (rhs.cols as isize, 1)
        };
        // SAFETY: strides and dimensions describe exactly the buffers above;
        // `out` is a distinct, fully sized allocation.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                self.data.as_ptr(),
                rsa,
                csa,
                rhs.data.as_ptr(),
                rsb,
                csb,
                0.0,
                out.data.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        out
    }

    pub fn matmul(&self, rhs: &Tensor) -> Tensor {
        self.matmul_t(rhs, false, false)
    }

    /// Rows `idx` of `self`, in order.
    pub fn gather_rows(&self, idx: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Tensor::from_vec(idx.len(), self.cols, data)
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor({}x{}", self.rows, self.cols)?;
        if self.len() <= 16 {
            write!(f, ", {:?}", self.data)?;
        }
        write!(f, ")")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &Tensor, b: &Tensor) -> Tensor {
        let mut out = Tensor::zeros(a.rows(), b.cols());
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
    fn matmul_transpose_flags_agree_with_naive_product() {
        let a = Tensor::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Tensor::from_vec(3, 2, vec![0.5, -1.0, 2.0, 0.0, 1.0, 3.0]);
        let expected = naive(&a, &b);
        assert!(a.matmul(&b).max_abs_diff(&expected) < 1e-14);
        let at = a.transpose();
        let bt = b.transpose();
        assert!(at.matmul_t(&b, true, false).max_abs_diff(&expected) < 1e-14);
        assert!(a.matmul_t(&bt, false, true).max_abs_diff(&expected) < 1e-14);
        assert!(at.matmul_t(&bt, true, true).max_abs_diff(&expected) < 1e-14);
    }

    #[test]
    fn gather_rows_preserves_order_and_repeats() {
        let t = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]);
        let g = t.gather_rows(&[2, 0, 2]);
        assert_eq!(g.data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
    }

    #[test]
    fn empty_inner_dimension_gives_zeros() {
        let a = Tensor::zeros(2, 0);
        let b = Tensor::zeros(0, 3);
        assert_eq!(a.matmul(&b), Tensor::zeros(2, 3));
    }
}
