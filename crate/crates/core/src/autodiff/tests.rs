use std::cell::Cell;

use super::*;
use crate::sparse::{SparseMatrix, SparseOperator};

fn close(a: &Tensor, b: &Tensor, tol: f64) {
    assert_eq!(a.shape(), b.shape());
    let d = a.max_abs_diff(b);
    assert!(d < tol, "max diff {d} >= {tol}\n{a:?}\n{b:?}");
}

#[test]
fn relu_forward() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::row_vector(vec![-1.0, 0.0, 2.0]));
    let y = t.relu(x).unwrap();
    assert_eq!(t.value(y).data(), &[0.0, 0.0, 2.0]);
}

#[test]
fn uniform_logits_give_log_c() {
    let mut t = Tape::new();
    let logits = t.constant(Tensor::zeros(4, 7));
    let loss = t.softmax_cross_entropy(logits, &[0, 3, 6, 2]).unwrap();
    assert!((t.value(loss).item() - 7f64.ln()).abs() < 1e-12);
    assert!((7f64.ln() - 1.9459).abs() < 1e-4);
}

#[test]
fn spmm_with_identity_is_exact() {
    let mut t = Tape::new();
    let x = Tensor::from_rows(&[vec![0.1, -2.5], vec![3.3, 1e-7], vec![4.0, 5.0]]);
    let xv = t.constant(x.clone());
    let y = t.spmm(&SparseOperator::new(SparseMatrix::identity(3)), xv).unwrap();
    assert_eq!(t.value(y), &x);
}

#[test]
fn quadratic_and_dead_relu_gradients() {
    let mut t = Tape::new();
    let theta = t.leaf(Tensor::row_vector(vec![1.0, 2.0]));
    let sq = t.mul(theta, theta).unwrap();
    let loss = t.sum_all(sq).unwrap();
    let g = t.gradients(loss, &[theta]).unwrap();
    assert_eq!(g[0].data(), &[2.0, 4.0]);

    let mut t = Tape::new();
    let theta = t.leaf(Tensor::scalar(1.0));
    let neg = t.scale(theta, -1.0).unwrap();
    let loss = t.relu(neg).unwrap();
    let g = t.gradients(loss, &[theta]).unwrap();
    assert_eq!(g[0].item(), 0.0);
}

#[test]
fn unreachable_leaf_gets_zero_gradient() {
    let mut t = Tape::new();
    let a = t.leaf(Tensor::scalar(3.0));
    let b = t.leaf(Tensor::from_vec(2, 2, vec![1.0; 4]));
    let loss = t.mul(a, a).unwrap();
    let g = t.gradients(loss, &[a, b]).unwrap();
    assert_eq!(g[0].item(), 6.0);
    assert_eq!(g[1], Tensor::zeros(2, 2));
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut t = Tape::new();
    let a = t.leaf(Tensor::zeros(2, 1));
    assert_eq!(
        t.grad(a, &[a]).unwrap_err(),
        AutodiffError::NotScalar { rows: 2, cols: 1 }
    );
}

#[test]
fn shape_errors_name_the_primitive() {
    let mut t = Tape::new();
    let a = t.leaf(Tensor::zeros(2, 3));
    let b = t.leaf(Tensor::zeros(2, 3));
    match t.matmul(a, b).unwrap_err() {
        AutodiffError::ShapeMismatch { op, lhs, rhs } => {
            assert_eq!(op, "matmul");
            assert_eq!(lhs, (2, 3));
            assert_eq!(rhs, (2, 3));
        }
        e => panic!("unexpected {e:?}"),
    }
    let bias = t.leaf(Tensor::zeros(1, 2));
    assert!(matches!(
        t.add_bias(a, bias),
        Err(AutodiffError::ShapeMismatch { op: "add_bias", .. })
    ));
    assert!(t.dropout(a, 1.0, 0, true).is_err());
}

#[test]
fn dropout_eval_is_identity_and_train_is_seeded() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::from_vec(10, 10, (0..100).map(f64::from).collect()));
    assert_eq!(t.dropout(x, 0.5, 1, false).unwrap(), x);
    let a = t.dropout(x, 0.5, 1, true).unwrap();
    let b = t.dropout(x, 0.5, 1, true).unwrap();
    assert_eq!(t.value(a), t.value(b));
    let kept = t.value(a).data().iter().filter(|&&v| v != 0.0).count();
    assert!(kept > 25 && kept < 75, "{kept}");
    for (o, d) in t.value(x).data().iter().zip(t.value(a).data()) {
        assert!(*d == 0.0 || (*d - 2.0 * o).abs() < 1e-12);
    }
}

#[test]
fn backward_is_linear_in_the_loss() {
    let build = |t: &mut Tape, w: Var, x: Var| -> (Var, Var) {
        let h = t.matmul(x, w).unwrap();
        let s = t.sigmoid(h).unwrap();
        let l1 = t.sum_all(s).unwrap();
        let sq = t.mul(h, h).unwrap();
        let l2 = t.sum_all(sq).unwrap();
        (l1, l2)
    };
    let w0 = Tensor::from_vec(3, 2, vec![0.3, -0.2, 0.5, 0.1, -0.7, 0.9]);
    let x0 = Tensor::from_vec(4, 3, (0..12).map(|i| (i as f64 * 0.37).sin()).collect());
    let (a, b) = (0.7, -1.3);

    let mut t = Tape::new();
    let w = t.leaf(w0.clone());
    let x = t.constant(x0.clone());
    let (l1, l2) = build(&mut t, w, x);
    let g1 = t.gradients(l1, &[w]).unwrap().remove(0);
    let g2 = t.gradients(l2, &[w]).unwrap().remove(0);
    let sa = t.scale(l1, a).unwrap();
    let sb = t.scale(l2, b).unwrap();
    let combo = t.add(sa, sb).unwrap();
    let gc = t.gradients(combo, &[w]).unwrap().remove(0);
    let expected = g1.zip_map(&g2, |p, q| a * p + b * q);
    close(&gc, &expected, 1e-10);
}

#[test]
fn spmm_backward_matches_dense_transpose() {
    let s = SparseMatrix::from_triplets(
        4,
        3,
        &[(0, 0, 1.0), (0, 2, -2.0), (1, 1, 0.5), (3, 0, 3.0), (3, 2, 1.5)],
    );
    let x0 = Tensor::from_vec(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    let upstream = Tensor::from_vec(4, 2, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8]);
    let mut t = Tape::new();
    let x = t.leaf(x0);
    let y = t.spmm(&SparseOperator::new(s.clone()), x).unwrap();
    let u = t.constant(upstream.clone());
    let prod = t.mul(y, u).unwrap();
    let loss = t.sum_all(prod).unwrap();
    let g = t.gradients(loss, &[x]).unwrap().remove(0);
    let expected = s.to_dense().transpose().matmul(&upstream);
    close(&g, &expected, 1e-14);
}

#[test]
fn repeated_backward_passes_agree() {
    let mut t = Tape::new();
    let w = t.leaf(Tensor::from_vec(2, 2, vec![0.5, -1.0, 2.0, 0.25]));
    let x = t.constant(Tensor::from_vec(3, 2, vec![1.0, 2.0, -1.0, 0.5, 0.0, 3.0]));
    let h = t.matmul(x, w).unwrap();
    let loss = t.softmax_cross_entropy(h, &[0, 1, 1]).unwrap();
    let len = t.len();
    let g1 = t.gradients(loss, &[w]).unwrap();
    assert_eq!(t.len(), len);
    let g2 = t.gradients(loss, &[w]).unwrap();
    assert_eq!(g1, g2);
}

#[test]
fn second_order_through_recorded_gradient() {
    // f(x) = x³ → f'(x) = 3x², f''(x) = 6x.
    let mut t = Tape::new();
    let x = t.leaf(Tensor::scalar(1.5));
    let x2 = t.mul(x, x).unwrap();
    let x3 = t.mul(x2, x).unwrap();
    let dx = t.grad(x3, &[x]).unwrap()[0];
    assert!((t.value(dx).item() - 6.75).abs() < 1e-12);
    let ddx = t.gradients(dx, &[x]).unwrap();
    assert!((ddx[0].item() - 9.0).abs() < 1e-12);
}

/// A scalar function touching every primitive, for first- and second-order
/// checks against finite differences.
fn kitchen_sink(t: &mut Tape, p: &[Var]) -> Result<Var> {
    let (w, b, v) = (p[0], p[1], p[2]);
    let x = t.constant(Tensor::from_vec(
        4,
        3,
        vec![0.2, -0.4, 1.0, 0.7, 0.1, -0.3, -0.5, 0.9, 0.6, 0.3, 0.3, -0.8],
    ));
    let s = SparseOperator::new(SparseMatrix::from_triplets(
        4,
        4,
        &[(0, 1, 0.5), (1, 0, 0.5), (1, 2, 0.5), (2, 3, 1.0), (3, 3, 0.25)],
    ));
    let h = t.matmul(x, w)?; // 4×2
    let h = t.add_bias(h, b)?;
    let h = t.spmm(&s, h)?;
    let r = t.relu(h)?;
    let sg = t.sigmoid(h)?;
    let c = t.concat_cols(r, sg)?; // 4×4
    let left = t.slice_cols(c, 1, 2)?;
    let padded = t.pad_cols(left, 1, 3)?; // 4×3
    let g = t.gather_rows(padded, &[3, 0, 0, 2])?;
    let sc = t.scatter_rows(g, &[1, 1, 0, 2], 3)?; // 3×3
    let ge = t.gather_elems(sc, &[0, 1, 2, 2, 1, 0], 2)?; // 2×3
    let se = t.scatter_elems(ge, &[1, 0, 1, 0, 0, 1], 2)?; // 2×3
    let shifted = t.affine(se, 0.5, 2.0)?;
    let rec = t.reciprocal(shifted)?;
    let rs = t.row_sum(rec)?;
    let bc = t.broadcast_cols(rs, 3)?;
    let cs = t.sum_rows(bc)?; // 1×3
    let br = t.broadcast_rows(cs, 2)?;
    let sm = t.softmax_rows(br)?;
    let vv = t.mul(v, v)?;
    let mixed = t.matmul_t(sm, vv, false, true)?; // 2×3
    let diff = t.sub(mixed, sm)?;
    let flat = t.reshape(diff, 3, 2)?;
    let z = t.matmul_t(flat, w, true, false)?; // 2×2
    let loss1 = t.softmax_cross_entropy(z, &[1, 0])?;
    let tot = t.sum_all(rec)?;
    let scaled = t.broadcast_scalar(tot, 1, 1)?;
    t.add(loss1, scaled)
}

fn sink_params() -> Vec<Tensor> {
    vec![
        Tensor::from_vec(3, 2, vec![0.3, -0.6, 0.8, 0.2, -0.1, 0.5]),
        Tensor::row_vector(vec![0.05, -0.02]),
        Tensor::from_vec(3, 3, vec![0.4, -0.3, 0.2, 0.1, 0.6, -0.5, 0.3, 0.2, 0.1]),
    ]
}

#[test]
fn every_primitive_passes_finite_differences() {
    let report = grad_check(kitchen_sink, &sink_params(), 1e-6, 100, 3).unwrap();
    assert!(report.max_rel_error < 1e-6, "{report:?}");
}

#[test]
fn second_order_matches_finite_differences_of_gradients() {
    // Hessian-vector product via the recorded gradient versus central
    // differences of first-order gradients.
    let params = sink_params();
    let dir: Vec<Tensor> = params
        .iter()
        .enumerate()
        .map(|(k, p)| p.map(|v| (v * 13.0 + k as f64).sin()))
        .collect();

    let mut t = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| t.leaf(p.clone())).collect();
    let loss = kitchen_sink(&mut t, &vars).unwrap();
    let grads = t.grad(loss, &vars).unwrap();
    let mut gv = None;
    for (g, d) in grads.iter().zip(&dir) {
        let dv = t.constant(d.clone());
        let prod = t.mul(*g, dv).unwrap();
        let s = t.sum_all(prod).unwrap();
        gv = Some(match gv {
            None => s,
            Some(acc) => t.add(acc, s).unwrap(),
        });
    }
    let hvp = t.gradients(gv.unwrap(), &vars).unwrap();

    let eps = 1e-5;
    let grad_at = |sign: f64| -> Vec<Tensor> {
        let shifted: Vec<Tensor> = params
            .iter()
            .zip(&dir)
            .map(|(p, d)| p.zip_map(d, |a, b| a + sign * eps * b))
            .collect();
        let mut t = Tape::new();
        let vars: Vec<Var> = shifted.iter().map(|p| t.leaf(p.clone())).collect();
        let loss = kitchen_sink(&mut t, &vars).unwrap();
        t.gradients(loss, &vars).unwrap()
    };
    let (gp, gm) = (grad_at(1.0), grad_at(-1.0));
    for k in 0..params.len() {
        let fd = gp[k].zip_map(&gm[k], |a, b| (a - b) / (2.0 * eps));
        close(&hvp[k], &fd, 1e-6);
    }
}

#[test]
fn grad_check_linear_model_is_exact() {
    let x = Tensor::from_vec(3, 1, vec![0.5, -1.0, 2.0]);
    let forward = move |t: &mut Tape, p: &[Var]| {
        let xv = t.constant(x.clone());
        let y = t.matmul(p[0], xv)?;
        t.sum_all(y)
    };
    let w = Tensor::from_vec(2, 3, vec![0.1, 0.2, 0.3, -0.4, 0.5, -0.6]);
    let report = grad_check(forward, &[w], 1e-5, 50, 0).unwrap();
    assert!(report.max_rel_error < 1e-8, "{report:?}");
    assert_eq!(report.checked, 6);
}

#[test]
fn grad_check_sigmoid_chain() {
    let forward = |t: &mut Tape, p: &[Var]| {
        let a = t.sigmoid(p[0])?;
        let b = t.sigmoid(a)?;
        let c = t.sigmoid(b)?;
        t.sum_all(c)
    };
    let x = Tensor::row_vector(vec![-2.0, -0.5, 0.0, 0.3, 1.7]);
    let report = grad_check(forward, &[x], 1e-5, 50, 0).unwrap();
    assert!(report.max_rel_error < 1e-6, "{report:?}");
}

#[test]
fn grad_check_detects_live_dropout() {
    let calls = Cell::new(0u64);
    let forward = |t: &mut Tape, p: &[Var]| {
        calls.set(calls.get() + 1);
        let d = t.dropout(p[0], 0.5, calls.get(), true)?;
        t.sum_all(d)
    };
    let x = Tensor::from_vec(8, 8, vec![1.0; 64]);
    assert!(matches!(
        grad_check(forward, &[x], 1e-5, 50, 0),
        Err(AutodiffError::NonDeterministic { .. })
    ));
}
