//! Compressed sparse row matrices.

use std::collections::HashMap;
use std::sync::Arc;

use rayon::prelude::*;
use thiserror::Error;

use crate::tensor::Tensor;

/// Rows at or above this count are multiplied in parallel. Each output row
/// is reduced sequentially, so results do not depend on the thread count.
const PARALLEL_ROWS: usize = 2048;

#[derive(Debug, Error, PartialEq)]
pub enum CsrError {
    #[error("row pointer array has length {got}, expected {expected}")]
    IndptrLength { got: usize, expected: usize },
    #[error("row pointers must start at 0 and be non-decreasing (row {row})")]
    IndptrOrder { row: usize },
    #[error("last row pointer {last} does not match {nnz} stored entries")]
    IndptrEnd { last: usize, nnz: usize },
    #[error("column index {col} in row {row} is out of range for {cols} columns")]
    ColumnOutOfRange { row: usize, col: usize, cols: usize },
    #[error("column indices in row {row} are unsorted or duplicated")]
    UnsortedRow { row: usize },
    #[error("values length {values} differs from indices length {indices}")]
    ValuesLength { values: usize, indices: usize },
}

/// CSR matrix with sorted, duplicate-free column indices in every row.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// Validates and wraps a CSR triple.
    pub fn try_new(
        rows: usize,
        cols: usize,
        indptr: Vec<usize>,
        indices: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<Self, CsrError> {
        if indptr.len() != rows + 1 {
            return Err(CsrError::IndptrLength {
                got: indptr.len(),
                expected: rows + 1,
            });
        }
        if values.len() != indices.len() {
            return Err(CsrError::ValuesLength {
                values: values.len(),
                indices: indices.len(),
            });
        }
        if indptr[0] != 0 {
            return Err(CsrError::IndptrOrder { row: 0 });
        }
        for r in 0..rows {
            if indptr[r + 1] < indptr[r] {
                return Err(CsrError::IndptrOrder { row: r });
            }
        }
        if indptr[rows] != indices.len() {
            return Err(CsrError::IndptrEnd {
                last: indptr[rows],
                nnz: indices.len(),
            });
        }
        for r in 0..rows {
            let row = &indices[indptr[r]..indptr[r + 1]];
            for (k, &c) in row.iter().enumerate() {
                if c >= cols {
                    return Err(CsrError::ColumnOutOfRange { row: r, col: c, cols });
                }
                if k > 0 && row[k - 1] >= c {
                    return Err(CsrError::UnsortedRow { row: r });
                }
            }
        }
        Ok(Self {
            rows,
            cols,
            indptr,
            indices,
            values,
        })
    }

    /// Builds a matrix from `(row, col, value)` triplets, summing duplicates.
    ///
    /// Panics on out-of-range coordinates.
    pub fn from_triplets(rows: usize, cols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut sorted: Vec<(usize, usize, f64)> = triplets.to_vec();
        for &(r, c, _) in &sorted {
            assert!(r < rows && c < cols, "triplet ({r}, {c}) out of range");
        }
        sorted.sort_by_key(|t| (t.0, t.1));
        let mut indptr = vec![0usize; rows + 1];
        let mut indices = Vec::with_capacity(sorted.len());
        let mut values: Vec<f64> = Vec::with_capacity(sorted.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in sorted {
            if last == Some((r, c)) {
                *values.last_mut().expect("duplicate follows an entry") += v;
                continue;
            }
            indices.push(c);
            values.push(v);
            indptr[r + 1] += 1;
            last = Some((r, c));
        }
        for r in 0..rows {
            indptr[r + 1] += indptr[r];
        }
        Self {
            rows,
            cols,
            indptr,
            indices,
            values,
        }
    }

    /// Sparse copy of a dense tensor, dropping exact zeros.
    pub fn from_dense(t: &Tensor) -> Self {
        let mut indptr = Vec::with_capacity(t.rows() + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for r in 0..t.rows() {
            for (c, &v) in t.row(r).iter().enumerate() {
                if v != 0.0 {
                    indices.push(c);
                    values.push(v);
                }
            }
            indptr.push(indices.len());
        }
        Self {
            rows: t.rows(),
            cols: t.cols(),
            indptr,
            indices,
            values,
        }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            rows: n,
            cols: n,
            indptr: (0..=n).collect(),
            indices: (0..n).collect(),
            values: vec![1.0; n],
        }
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
    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn indptr(&self) -> &[usize] {
        &self.indptr
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Column indices and values stored in row `r`.
    #[inline]
    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let span = self.indptr[r]..self.indptr[r + 1];
        (&self.indices[span.clone()], &self.values[span])
    }

    /// Stored value at `(r, c)`, or 0.
    pub fn get(&self, r: usize, c: usize) -> f64 {
        let (cols, vals) = self.row(r);
        match cols.binary_search(&c) {
            Ok(k) => vals[k],
            Err(_) => 0.0,
        }
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows).map(|r| self.row(r).1.iter().sum()).collect()
    }

    pub fn transpose(&self) -> SparseMatrix {
        let mut counts = vec![0usize; self.cols + 1];
        for &c in &self.indices {
            counts[c + 1] += 1;
        }
        for c in 0..self.cols {
            counts[c + 1] += counts[c];
        }
        let indptr = counts.clone();
        let mut next = counts;
        let mut indices = vec![0usize; self.nnz()];
        let mut values = vec![0.0; self.nnz()];
        // Rows are visited in increasing order, so each output row stays sorted.
        for r in 0..self.rows {
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                let slot = next[c];
                indices[slot] = r;
                values[slot] = v;
                next[c] += 1;
            }
        }
        SparseMatrix {
            rows: self.cols,
            cols: self.rows,
            indptr,
            indices,
            values,
        }
    }

    pub fn to_dense(&self) -> Tensor {
        let mut out = Tensor::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                out.set(r, c, v);
            }
        }
        out
    }

    /// `alpha · self + beta · I`, keeping an explicit diagonal entry in every row.
    pub fn scale_add_identity(&self, alpha: f64, beta: f64) -> SparseMatrix {
        assert_eq!(self.rows, self.cols, "identity shift needs a square matrix");
        let mut indptr = Vec::with_capacity(self.rows + 1);
        let mut indices = Vec::with_capacity(self.nnz() + self.rows);
        let mut values = Vec::with_capacity(self.nnz() + self.rows);
        indptr.push(0);
        for r in 0..self.rows {
            let (cols, vals) = self.row(r);
            let mut diag_done = false;
            for (&c, &v) in cols.iter().zip(vals) {
                if !diag_done && c >= r {
                    if c == r {
                        indices.push(c);
                        values.push(alpha * v + beta);
                        diag_done = true;
                        continue;
                    }
                    indices.push(r);
                    values.push(beta);
                    diag_done = true;
                }
                indices.push(c);
                values.push(alpha * v);
            }
            if !diag_done {
                indices.push(r);
                values.push(beta);
            }
            indptr.push(indices.len());
        }
        SparseMatrix {
            rows: self.rows,
            cols: self.cols,
            indptr,
            indices,
            values,
        }
    }

    /// Sparse–dense product `self · x`.
    pub fn mul_dense(&self, x: &Tensor) -> Tensor {
        assert_eq!(self.cols, x.rows(), "spmm inner dimensions differ");
        let width = x.cols();
        let mut out = Tensor::zeros(self.rows, width);
        if width == 0 {
            return out;
        }
        let kernel = |r: usize, dst: &mut [f64]| {
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                for (d, s) in dst.iter_mut().zip(x.row(c)) {
                    *d += v * s;
                }
            }
        };
        if self.rows >= PARALLEL_ROWS {
            out.data_mut()
                .par_chunks_mut(width)
                .enumerate()
                .for_each(|(r, dst)| kernel(r, dst));
        } else {
            out.data_mut()
                .chunks_mut(width)
                .enumerate()
                .for_each(|(r, dst)| kernel(r, dst));
        }
        out
    }

    /// Row-vector product `vᵀ · self`.
    pub fn left_mul_vec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (r, &weight) in v.iter().enumerate() {
            if weight == 0.0 {
                continue;
            }
            let (cols, vals) = self.row(r);
            for (&c, &p) in cols.iter().zip(vals) {
                out[c] += weight * p;
            }
        }
        out
    }

    /// Sparse–sparse sum `self + other`.
    pub fn add(&self, other: &SparseMatrix) -> SparseMatrix {
        assert_eq!(self.shape(), other.shape());
        let mut triplets = Vec::with_capacity(self.nnz() + other.nnz());
        for m in [self, other] {
            for r in 0..m.rows {
                let (cols, vals) = m.row(r);
                triplets.extend(cols.iter().zip(vals).map(|(&c, &v)| (r, c, v)));
            }
        }
        SparseMatrix::from_triplets(self.rows, self.cols, &triplets)
    }

    pub fn scale(&self, alpha: f64) -> SparseMatrix {
        SparseMatrix {
            values: self.values.iter().map(|v| alpha * v).collect(),
            ..self.clone()
        }
    }

    /// Sparse–sparse product `self · rhs` (row-by-row with a dense
    /// accumulator). Explicit zeros produced by cancellation are kept.
    pub fn mul_sparse(&self, rhs: &SparseMatrix) -> SparseMatrix {
        assert_eq!(self.cols, rhs.rows, "sparse product inner dimensions differ");
        let rows: Vec<(Vec<usize>, Vec<f64>)> = (0..self.rows)
            .into_par_iter()
            .map(|r| {
                let mut acc: HashMap<usize, f64> = HashMap::new();
                let (cols, vals) = self.row(r);
                for (&k, &a) in cols.iter().zip(vals) {
                    let (rc, rv) = rhs.row(k);
                    for (&c, &b) in rc.iter().zip(rv) {
                        *acc.entry(c).or_insert(0.0) += a * b;
                    }
                }
                let mut entries: Vec<(usize, f64)> = acc.into_iter().collect();
                entries.sort_unstable_by_key(|e| e.0);
                entries.into_iter().unzip()
            })
            .collect();
        let mut indptr = Vec::with_capacity(self.rows + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for (c, v) in rows {
            indices.extend(c);
            values.extend(v);
            indptr.push(indices.len());
        }
        SparseMatrix {
            rows: self.rows,
            cols: rhs.cols,
            indptr,
            indices,
            values,
        }
    }

    /// Largest `|a_ij − a_ji|` over stored entries of either triangle.
    pub fn asymmetry(&self) -> f64 {
        if self.rows != self.cols {
            return f64::INFINITY;
        }
        let mut worst: f64 = 0.0;
        for r in 0..self.rows {
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                worst = worst.max((v - self.get(c, r)).abs());
            }
        }
        worst
    }
}

/// A constant sparse matrix paired with its transpose, as used by the
/// differentiable sparse product.
#[derive(Clone, Debug)]
pub struct SparseOperator {
    forward: Arc<SparseMatrix>,
    adjoint: Arc<SparseMatrix>,
}

impl SparseOperator {
    pub fn new(m: SparseMatrix) -> Self {
        let adjoint = Arc::new(m.transpose());
        Self {
            forward: Arc::new(m),
            adjoint,
        }
    }

    /// Operator whose transpose is itself; the caller vouches for symmetry.
    pub fn symmetric(m: SparseMatrix) -> Self {
        debug_assert!(m.asymmetry() < 1e-12);
        let forward = Arc::new(m);
        Self {
            adjoint: Arc::clone(&forward),
            forward,
        }
    }

    pub fn matrix(&self) -> &SparseMatrix {
        &self.forward
    }

    pub fn transposed(&self) -> Self {
        Self {
            forward: Arc::clone(&self.adjoint),
            adjoint: Arc::clone(&self.forward),
        }
    }
}
