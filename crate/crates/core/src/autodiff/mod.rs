//! Minimal tape-based reverse-mode differentiation.
//!
//! A [`Tape`] records every primitive applied to [`Var`] handles together with
//! its forward value. [`Tape::grad`] walks the tape backwards and records the
//! vector–Jacobian products as ordinary primitives on the same tape, so the
//! gradients it returns are themselves differentiable. That is what makes the
//! second-order meta update possible. [`Tape::gradients`] is the first-order
//! convenience: it extracts the values and discards the recorded backward
//! pass.
//!
//! Only the primitives the model needs are provided. All values are `f64`
//! matrices; there is no broadcasting beyond the explicit broadcast ops.

mod backward;
mod gradcheck;

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::sparse::SparseOperator;
use crate::tensor::Tensor;

pub use gradcheck::{grad_check, GradCheckReport, GRAD_CHECK_MIN_COORDS};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("{op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
    #[error("backward needs a 1x1 loss, got {rows}x{cols}")]
    NotScalar { rows: usize, cols: usize },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("forward closure is not deterministic: {first} then {second}")]
    NonDeterministic { first: f64, second: f64 },
}

type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Constant,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Spmm { op: SparseOperator, x: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine { x: Var, scale: f64 },
    AddBias { x: Var, bias: Var },
    SumRows(Var),
    BroadcastRows(Var),
    RowSum(Var),
    BroadcastCols(Var),
    SumAll(Var),
    BroadcastScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Reciprocal(Var),
    SoftmaxRows(Var),
    SoftmaxCrossEntropy { logits: Var, targets: Arc<[usize]> },
    ConcatCols(Var, Var),
    SliceCols { x: Var, start: usize },
    PadCols { x: Var, start: usize },
    GatherRows { x: Var, idx: Arc<[usize]> },
    ScatterRows { x: Var, idx: Arc<[usize]> },
    GatherElems { x: Var, src: Arc<[usize]> },
    ScatterElems { x: Var, src: Arc<[usize]> },
    Reshape(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::MatMul { .. } => "matmul",
            Op::Spmm { .. } => "spmm",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Affine { .. } => "affine",
            Op::AddBias { .. } => "add_bias",
            Op::SumRows(_) => "sum_rows",
            Op::BroadcastRows(_) => "broadcast_rows",
            Op::RowSum(_) => "row_sum",
            Op::BroadcastCols(_) => "broadcast_cols",
            Op::SumAll(_) => "sum_all",
            Op::BroadcastScalar(_) => "broadcast_scalar",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Reciprocal(_) => "reciprocal",
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceCols { .. } => "slice_cols",
            Op::PadCols { .. } => "pad_cols",
            Op::GatherRows { .. } => "gather_rows",
            Op::ScatterRows { .. } => "scatter_rows",
            Op::GatherElems { .. } => "gather_elems",
            Op::ScatterElems { .. } => "scatter_elems",
            Op::Reshape(_) => "reshape",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Constant => vec![],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::ConcatCols(a, b) => vec![*a, *b],
            Op::AddBias { x, bias } => vec![*x, *bias],
            Op::Spmm { x, .. }
            | Op::Affine { x, .. }
            | Op::SliceCols { x, .. }
            | Op::PadCols { x, .. }
            | Op::GatherRows { x, .. }
            | Op::ScatterRows { x, .. }
            | Op::GatherElems { x, .. }
            | Op::ScatterElems { x, .. } => vec![*x],
            Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
            Op::SumRows(x)
            | Op::BroadcastRows(x)
            | Op::RowSum(x)
            | Op::BroadcastCols(x)
            | Op::SumAll(x)
            | Op::BroadcastScalar(x)
            | Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::Reciprocal(x)
            | Op::SoftmaxRows(x)
            | Op::Reshape(x) => vec![*x],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of primitive applications. Nodes are appended in
/// evaluation order, so the tape is topologically sorted by construction.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if cfg!(debug_assertions) && !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: op.name() });
        }
        let requires_grad = match op {
            Op::Leaf => true,
            Op::Constant => false,
            _ => op.inputs().iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A differentiable input (parameter).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_unchecked(value, Op::Leaf)
    }

    /// A value treated as fixed data.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_unchecked(value, Op::Constant)
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = matches!(op, Op::Leaf);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(AutodiffError::ShapeMismatch { op, lhs: sa, rhs: sb });
        }
        Ok(())
    }

    /// `op(a) · op(b)` where `op` transposes when the flag is set.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        let inner_a = if ta { ar } else { ac };
        let inner_b = if tb { bc } else { br };
        if inner_a != inner_b {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: (ar, ac),
                rhs: (br, bc),
            });
        }
        let value = self.value(a).matmul_t(self.value(b), ta, tb);
        self.push(value, Op::MatMul { a, b, ta, tb })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// Row-wise weighted sum: row `j` of the result is `Σ_i w_ji · x_i`.
    pub fn weighted_row_sum(&mut self, weights: Var, x: Var) -> Result<Var> {
        self.matmul(weights, x)
    }

    /// Constant sparse matrix times a dense value.
    pub fn spmm(&mut self, op: &SparseOperator, x: Var) -> Result<Var> {
        let m = op.matrix();
        if m.cols() != self.shape(x).0 {
            return Err(AutodiffError::ShapeMismatch {
                op: "spmm",
                lhs: m.shape(),
                rhs: self.shape(x),
            });
        }
        let value = m.mul_dense(self.value(x));
        self.push(value, Op::Spmm { op: op.clone(), x })
    }

    /// Averages each row over a neighborhood encoded by a row-normalized
    /// pooling operator.
    pub fn row_mean_over_neighbors(&mut self, pool: &SparseOperator, x: Var) -> Result<Var> {
        self.spmm(pool, x)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(value, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(value, Op::Mul(a, b))
    }

    /// `scale · x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let value = self.value(x).map(|v| scale * v + shift);
        self.push(value, Op::Affine { x, scale })
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Result<Var> {
        self.affine(x, scale, 0.0)
    }

    /// Adds a `1×c` bias to every row of an `n×c` value.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xr, xc) = self.shape(x);
        let bs = self.shape(bias);
        if bs != (1, xc) {
            return Err(AutodiffError::ShapeMismatch {
                op: "add_bias",
                lhs: (xr, xc),
                rhs: bs,
            });
        }
        let mut value = self.value(x).clone();
        let b = self.value(bias).data().to_vec();
        for r in 0..xr {
            for (v, bv) in value.row_mut(r).iter_mut().zip(&b) {
                *v += bv;
            }
        }
        self.push(value, Op::AddBias { x, bias })
    }

    /// Column sums as a `1×c` row.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let mut out = Tensor::zeros(1, t.cols());
        for r in 0..t.rows() {
            for (o, v) in out.data_mut().iter_mut().zip(t.row(r)) {
                *o += v;
            }
        }
        self.push(out, Op::SumRows(x))
    }

    /// Repeats a `1×c` row `rows` times.
    pub fn broadcast_rows(&mut self, x: Var, rows: usize) -> Result<Var> {
        let (xr, xc) = self.shape(x);
        if xr != 1 {
            return Err(AutodiffError::ShapeMismatch {
                op: "broadcast_rows",
                lhs: (xr, xc),
                rhs: (rows, xc),
            });
        }
        let row = self.value(x).data().to_vec();
        let mut data = Vec::with_capacity(rows * xc);
        for _ in 0..rows {
            data.extend_from_slice(&row);
        }
        self.push(Tensor::from_vec(rows, xc, data), Op::BroadcastRows(x))
    }

    /// Row sums as an `n×1` column.
    pub fn row_sum(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let data = (0..t.rows()).map(|r| t.row(r).iter().sum()).collect();
        self.push(Tensor::from_vec(t.rows(), 1, data), Op::RowSum(x))
    }

    /// Repeats an `n×1` column `cols` times.
    pub fn broadcast_cols(&mut self, x: Var, cols: usize) -> Result<Var> {
        let (xr, xc) = self.shape(x);
        if xc != 1 {
            return Err(AutodiffError::ShapeMismatch {
                op: "broadcast_cols",
                lhs: (xr, xc),
                rhs: (xr, cols),
            });
        }
        let col = self.value(x).data().to_vec();
        let mut data = Vec::with_capacity(xr * cols);
        for v in col {
            data.extend(std::iter::repeat_n(v, cols));
        }
        self.push(Tensor::from_vec(xr, cols, data), Op::BroadcastCols(x))
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::SumAll(x))
    }

    pub fn broadcast_scalar(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let s = self.shape(x);
        if s != (1, 1) {
            return Err(AutodiffError::ShapeMismatch {
                op: "broadcast_scalar",
                lhs: s,
                rhs: (rows, cols),
            });
        }
        let v = self.value(x).item();
        self.push(Tensor::filled(rows, cols, v), Op::BroadcastScalar(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(value, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(stable_sigmoid);
        self.push(value, Op::Sigmoid(x))
    }

    pub fn reciprocal(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| 1.0 / v);
        self.push(value, Op::Reciprocal(x))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let value = softmax_rows(self.value(x));
        self.push(value, Op::SoftmaxRows(x))
    }

    /// Mean cross-entropy between row-wise softmax of `logits` and integer
    /// `targets`, as a `1×1` value.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (rows, cols) = t.shape();
        if targets.len() != rows || rows == 0 {
            return Err(AutodiffError::ShapeMismatch {
                op: "softmax_cross_entropy",
                lhs: (rows, cols),
                rhs: (targets.len(), 1),
            });
        }
        if let Some(&bad) = targets.iter().find(|&&c| c >= cols) {
            return Err(AutodiffError::InvalidArgument {
                op: "softmax_cross_entropy",
                reason: format!("target class {bad} out of range for {cols} classes"),
            });
        }
        let mut total = 0.0;
        for (r, &target) in targets.iter().enumerate() {
            let row = t.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[target];
        }
        let value = Tensor::scalar(total / rows as f64);
        self.push(
            value,
            Op::SoftmaxCrossEntropy {
                logits,
                targets: Arc::from(targets),
            },
        )
    }

    /// Row-wise concatenation `[a | b]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ar != br {
            return Err(AutodiffError::ShapeMismatch {
                op: "concat_cols",
                lhs: (ar, ac),
                rhs: (br, bc),
            });
        }
        let mut data = Vec::with_capacity(ar * (ac + bc));
        for r in 0..ar {
            data.extend_from_slice(self.value(a).row(r));
            data.extend_from_slice(self.value(b).row(r));
        }
        self.push(Tensor::from_vec(ar, ac + bc, data), Op::ConcatCols(a, b))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (xr, xc) = self.shape(x);
        if start + len > xc {
            return Err(AutodiffError::InvalidArgument {
                op: "slice_cols",
                reason: format!("columns {start}..{} out of range for {xc}", start + len),
            });
        }
        let t = self.value(x);
        let mut data = Vec::with_capacity(xr * len);
        for r in 0..xr {
            data.extend_from_slice(&t.row(r)[start..start + len]);
        }
        self.push(Tensor::from_vec(xr, len, data), Op::SliceCols { x, start })
    }

    /// Embeds `x` into a zero matrix with `total` columns starting at `start`.
    pub fn pad_cols(&mut self, x: Var, start: usize, total: usize) -> Result<Var> {
        let (xr, xc) = self.shape(x);
        if start + xc > total {
            return Err(AutodiffError::InvalidArgument {
                op: "pad_cols",
                reason: format!("{xc} columns at {start} exceed {total}"),
            });
        }
        let mut out = Tensor::zeros(xr, total);
        for r in 0..xr {
            out.row_mut(r)[start..start + xc].copy_from_slice(self.value(x).row(r));
        }
        self.push(out, Op::PadCols { x, start })
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let n = self.shape(x).0;
        check_indices("gather_rows", idx, n)?;
        let value = self.value(x).gather_rows(idx);
        self.push(
            value,
            Op::GatherRows {
                x,
                idx: Arc::from(idx),
            },
        )
    }

    /// Adds row `k` of `x` into row `idx[k]` of an `n`-row zero matrix.
    pub fn scatter_rows(&mut self, x: Var, idx: &[usize], n: usize) -> Result<Var> {
        let (xr, xc) = self.shape(x);
        if idx.len() != xr {
            return Err(AutodiffError::ShapeMismatch {
                op: "scatter_rows",
                lhs: (xr, xc),
                rhs: (idx.len(), 1),
            });
        }
        check_indices("scatter_rows", idx, n)?;
        let mut out = Tensor::zeros(n, xc);
        for (k, &i) in idx.iter().enumerate() {
            for (o, v) in out.row_mut(i).iter_mut().zip(self.value(x).row(k)) {
                *o += v;
            }
        }
        self.push(
            out,
            Op::ScatterRows {
                x,
                idx: Arc::from(idx),
            },
        )
    }

    /// Per-entry row selection: `out[i][c] = x[src[i·cols + c]][c]`.
    pub fn gather_elems(&mut self, x: Var, src: &[usize], rows: usize) -> Result<Var> {
        let (xr, xc) = self.shape(x);
        if src.len() != rows * xc {
            return Err(AutodiffError::ShapeMismatch {
                op: "gather_elems",
                lhs: (xr, xc),
                rhs: (rows, src.len() / xc.max(1)),
            });
        }
        check_indices("gather_elems", src, xr)?;
        let t = self.value(x);
        let data = src
            .iter()
            .enumerate()
            .map(|(k, &s)| t.get(s, k % xc))
            .collect();
        self.push(
            Tensor::from_vec(rows, xc, data),
            Op::GatherElems {
                x,
                src: Arc::from(src),
            },
        )
    }

    /// Adjoint of [`Tape::gather_elems`]: accumulates `x[i][c]` into
    /// `out[src[i·cols + c]][c]` of an `n`-row zero matrix.
    pub fn scatter_elems(&mut self, x: Var, src: &[usize], n: usize) -> Result<Var> {
        let (xr, xc) = self.shape(x);
        if src.len() != xr * xc {
            return Err(AutodiffError::ShapeMismatch {
                op: "scatter_elems",
                lhs: (xr, xc),
                rhs: (src.len(), 1),
            });
        }
        check_indices("scatter_elems", src, n)?;
        let mut out = Tensor::zeros(n, xc);
        for (k, (&s, &v)) in src.iter().zip(self.value(x).data()).enumerate() {
            let c = k % xc;
            let cur = out.get(s, c);
            out.set(s, c, cur + v);
        }
        self.push(
            out,
            Op::ScatterElems {
                x,
                src: Arc::from(src),
            },
        )
    }

    /// Reinterprets the row-major buffer with a new shape.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.0 * s.1 != rows * cols {
            return Err(AutodiffError::ShapeMismatch {
                op: "reshape",
                lhs: s,
                rhs: (rows, cols),
            });
        }
        let value = Tensor::from_vec(rows, cols, self.value(x).data().to_vec());
        self.push(value, Op::Reshape(x))
    }

    /// Inverted dropout: zeroes entries with probability `rate` and scales
    /// survivors by `1/(1−rate)`. With `train == false` (or `rate == 0`) the
    /// input handle is returned unchanged.
    pub fn dropout(&mut self, x: Var, rate: f64, seed: u64, train: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(AutodiffError::InvalidArgument {
                op: "dropout",
                reason: format!("rate {rate} outside [0, 1)"),
            });
        }
        if !train || rate == 0.0 {
            return Ok(x);
        }
        let (r, c) = self.shape(x);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = 1.0 / (1.0 - rate);
        let mask = (0..r * c)
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let mask = self.constant(Tensor::from_vec(r, c, mask));
        self.mul(x, mask)
    }
}

fn check_indices(op: &'static str, idx: &[usize], bound: usize) -> Result<()> {
    match idx.iter().find(|&&i| i >= bound) {
        Some(&bad) => Err(AutodiffError::InvalidArgument {
            op,
            reason: format!("index {bad} out of range for {bound} rows"),
        }),
        None => Ok(()),
    }
}

pub(crate) fn stable_sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable row-wise softmax.
pub fn softmax_rows(t: &Tensor) -> Tensor {
    let mut out = t.clone();
    for r in 0..t.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

#[cfg(test)]
mod tests;
