//! Reverse pass. Each vector–Jacobian product is written with tape
//! primitives, so a gradient recorded by [`Tape::grad`] can be differentiated
//! again.

use super::{AutodiffError, Op, Result, Tape, Var};
use crate::tensor::Tensor;

impl Tape {
    /// Gradients of the `1×1` value `loss` with respect to each of `wrt`,
    /// recorded on this tape. Inputs that do not influence `loss` receive a
    /// zero constant of their own shape.
    pub fn grad(&mut self, loss: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        let (rows, cols) = self.shape(loss);
        if (rows, cols) != (1, 1) {
            return Err(AutodiffError::NotScalar { rows, cols });
        }
        let mut acc: Vec<Option<Var>> = vec![None; loss.0 + 1];
        if self.requires_grad(loss) {
            acc[loss.0] = Some(self.constant(Tensor::scalar(1.0)));
        }
        for i in (0..=loss.0).rev() {
            let Some(upstream) = acc[i] else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let op = self.nodes[i].op.clone();
            for (input, contribution) in self.vjp(Var(i), &op, upstream)? {
                acc[input.0] = Some(match acc[input.0] {
                    Some(prev) => self.add(prev, contribution)?,
                    None => contribution,
                });
            }
        }
        wrt.iter()
            .map(|&w| match acc.get(w.0).copied().flatten() {
                Some(g) => Ok(g),
                None => {
                    let (r, c) = self.shape(w);
                    Ok(self.constant(Tensor::zeros(r, c)))
                }
            })
            .collect()
    }

    /// First-order gradients as plain tensors. The backward records are
    /// dropped afterwards, leaving the tape as it was.
    pub fn gradients(&mut self, loss: Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
        let mark = self.len();
        let grads = self.grad(loss, wrt);
        let out = grads.map(|g| g.iter().map(|&v| self.value(v).clone()).collect());
        self.truncate(mark);
        out
    }

    fn vjp(&mut self, out: Var, op: &Op, g: Var) -> Result<Vec<(Var, Var)>> {
        let needs = |tape: &Tape, v: Var| tape.requires_grad(v);
        let mut res = Vec::with_capacity(2);
        match op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul { a, b, ta, tb } => {
                let (a, b, ta, tb) = (*a, *b, *ta, *tb);
                if needs(self, a) {
                    let ga = if ta {
                        self.matmul_t(b, g, tb, true)?
                    } else {
                        self.matmul_t(g, b, false, !tb)?
                    };
                    res.push((a, ga));
                }
                if needs(self, b) {
                    let gb = if tb {
                        self.matmul_t(g, a, true, ta)?
                    } else {
                        self.matmul_t(a, g, !ta, false)?
                    };
                    res.push((b, gb));
                }
            }
            Op::Spmm { op, x } => {
                if needs(self, *x) {
                    let gx = self.spmm(&op.transposed(), g)?;
                    res.push((*x, gx));
                }
            }
            Op::Add(a, b) => {
                if needs(self, *a) {
                    res.push((*a, g));
                }
                if needs(self, *b) {
                    res.push((*b, g));
                }
            }
            Op::Sub(a, b) => {
                if needs(self, *a) {
                    res.push((*a, g));
                }
                if needs(self, *b) {
                    let neg = self.scale(g, -1.0)?;
                    res.push((*b, neg));
                }
            }
            Op::Mul(a, b) => {
                if needs(self, *a) {
                    let ga = self.mul(g, *b)?;
                    res.push((*a, ga));
                }
                if needs(self, *b) {
                    let gb = self.mul(g, *a)?;
                    res.push((*b, gb));
                }
            }
            Op::Affine { x, scale } => {
                let gx = self.scale(g, *scale)?;
                res.push((*x, gx));
            }
            Op::AddBias { x, bias } => {
                if needs(self, *x) {
                    res.push((*x, g));
                }
                if needs(self, *bias) {
                    let gb = self.sum_rows(g)?;
                    res.push((*bias, gb));
                }
            }
            Op::SumRows(x) => {
                let rows = self.shape(*x).0;
                let gx = self.broadcast_rows(g, rows)?;
                res.push((*x, gx));
            }
            Op::BroadcastRows(x) => {
                let gx = self.sum_rows(g)?;
                res.push((*x, gx));
            }
            Op::RowSum(x) => {
                let cols = self.shape(*x).1;
                let gx = self.broadcast_cols(g, cols)?;
                res.push((*x, gx));
            }
            Op::BroadcastCols(x) => {
                let gx = self.row_sum(g)?;
                res.push((*x, gx));
            }
            Op::SumAll(x) => {
                let (r, c) = self.shape(*x);
                let gx = self.broadcast_scalar(g, r, c)?;
                res.push((*x, gx));
            }
            Op::BroadcastScalar(x) => {
                let gx = self.sum_all(g)?;
                res.push((*x, gx));
            }
            Op::Relu(x) => {
                // The step function has zero derivative almost everywhere, so
                // the mask enters as a constant.
                let mask = self.value(*x).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                let mask = self.constant(mask);
                let gx = self.mul(g, mask)?;
                res.push((*x, gx));
            }
            Op::Sigmoid(x) => {
                let one_minus = self.affine(out, -1.0, 1.0)?;
                let slope = self.mul(out, one_minus)?;
                let gx = self.mul(g, slope)?;
                res.push((*x, gx));
            }
            Op::Reciprocal(x) => {
                let sq = self.mul(out, out)?;
                let slope = self.scale(sq, -1.0)?;
                let gx = self.mul(g, slope)?;
                res.push((*x, gx));
            }
            Op::SoftmaxRows(x) => {
                let cols = self.shape(out).1;
                let gy = self.mul(g, out)?;
                let dot = self.row_sum(gy)?;
                let dot = self.broadcast_cols(dot, cols)?;
                let centered = self.sub(g, dot)?;
                let gx = self.mul(out, centered)?;
                res.push((*x, gx));
            }
            Op::SoftmaxCrossEntropy { logits, targets } => {
                let (rows, cols) = self.shape(*logits);
                let probs = self.softmax_rows(*logits)?;
                let mut onehot = Tensor::zeros(rows, cols);
                for (r, &t) in targets.iter().enumerate() {
                    onehot.set(r, t, 1.0);
                }
                let onehot = self.constant(onehot);
                let diff = self.sub(probs, onehot)?;
                let diff = self.scale(diff, 1.0 / rows as f64)?;
                let gb = self.broadcast_scalar(g, rows, cols)?;
                let gx = self.mul(diff, gb)?;
                res.push((*logits, gx));
            }
            Op::ConcatCols(a, b) => {
                let ac = self.shape(*a).1;
                let bc = self.shape(*b).1;
                if needs(self, *a) {
                    let ga = self.slice_cols(g, 0, ac)?;
                    res.push((*a, ga));
                }
                if needs(self, *b) {
                    let gb = self.slice_cols(g, ac, bc)?;
                    res.push((*b, gb));
                }
            }
            Op::SliceCols { x, start } => {
                let total = self.shape(*x).1;
                let gx = self.pad_cols(g, *start, total)?;
                res.push((*x, gx));
            }
            Op::PadCols { x, start } => {
                let len = self.shape(*x).1;
                let gx = self.slice_cols(g, *start, len)?;
                res.push((*x, gx));
            }
            Op::GatherRows { x, idx } => {
                let n = self.shape(*x).0;
                let gx = self.scatter_rows(g, idx, n)?;
                res.push((*x, gx));
            }
            Op::ScatterRows { x, idx } => {
                let gx = self.gather_rows(g, idx)?;
                res.push((*x, gx));
            }
            Op::GatherElems { x, src } => {
                let n = self.shape(*x).0;
                let gx = self.scatter_elems(g, src, n)?;
                res.push((*x, gx));
            }
            Op::ScatterElems { x, src } => {
                let rows = self.shape(*x).0;
                let gx = self.gather_elems(g, src, rows)?;
                res.push((*x, gx));
            }
            Op::Reshape(x) => {
                let (r, c) = self.shape(*x);
                let gx = self.reshape(g, r, c)?;
                res.push((*x, gx));
            }
        }
        Ok(res)
    }
}
