//! Node encoder `f_e`: Chebyshev convolutions, each followed by ReLU,
//! neighborhood pooling and dropout.

use super::{Architecture, ChebLayerParams, Encoder, Mode, ParamVars, Pooling, PreparedGraph, Result};
use crate::autodiff::{AutodiffError, Tape, Var};
use crate::sparse::SparseOperator;

/// `Σ_k T_k(L̂)·x·θ_k + b` with the Chebyshev recursion
/// `Z_0 = x`, `Z_1 = L̂x`, `Z_k = 2L̂Z_{k−1} − Z_{k−2}` recorded on the tape.
pub fn cheb_conv(
    tape: &mut Tape,
    layer: &ChebLayerParams<Var>,
    lhat: &SparseOperator,
    x: Var,
) -> Result<Var> {
    let mut prev2: Option<Var> = None;
    let mut prev = x;
    let mut out: Option<Var> = None;
    for (k, &theta) in layer.coeffs.iter().enumerate() {
        let z = match k {
            0 => x,
            1 => tape.spmm(lhat, x)?,
            _ => {
                let lz = tape.spmm(lhat, prev)?;
                let twice = tape.scale(lz, 2.0)?;
                tape.sub(twice, prev2.expect("k ≥ 2 has two predecessors"))?
            }
        };
        if k >= 1 {
            prev2 = Some(prev);
            prev = z;
        }
        let term = tape.matmul(z, theta)?;
        out = Some(match out {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    let out = out.ok_or(AutodiffError::InvalidArgument {
        op: "cheb_conv",
        reason: "layer has no Chebyshev coefficients".into(),
    })?;
    Ok(tape.add_bias(out, layer.bias)?)
}

/// Convolution of constant input whose Chebyshev terms `T_k(L̂)·X` are
/// precomputed: `Σ_k basis_k · θ_k + b`.
pub fn cheb_conv_basis(
    tape: &mut Tape,
    layer: &ChebLayerParams<Var>,
    basis: &[SparseOperator],
) -> Result<Var> {
    if layer.coeffs.len() > basis.len() {
        return Err(AutodiffError::InvalidArgument {
            op: "cheb_conv",
            reason: format!(
                "{} coefficients but only {} precomputed terms",
                layer.coeffs.len(),
                basis.len()
            ),
        }
        .into());
    }
    let mut out: Option<Var> = None;
    for (term, &theta) in basis.iter().zip(&layer.coeffs) {
        let t = tape.spmm(term, theta)?;
        out = Some(match out {
            None => t,
            Some(acc) => tape.add(acc, t)?,
        });
    }
    let out = out.ok_or(AutodiffError::InvalidArgument {
        op: "cheb_conv",
        reason: "layer has no Chebyshev coefficients".into(),
    })?;
    Ok(tape.add_bias(out, layer.bias)?)
}

fn max_pool(tape: &mut Tape, x: Var, hoods: &[Vec<usize>]) -> Result<Var> {
    let value = tape.value(x);
    let cols = value.cols();
    let mut src = Vec::with_capacity(hoods.len() * cols);
    for hood in hoods {
        for c in 0..cols {
            // First maximum wins, so ties resolve to the smallest node id.
            let mut best = hood[0];
            for &j in &hood[1..] {
                if value.get(j, c) > value.get(best, c) {
                    best = j;
                }
            }
            src.push(best);
        }
    }
    Ok(tape.gather_elems(x, &src, hoods.len())?)
}

/// Per-node embeddings `f_e`, one row per node.
pub fn encode_nodes(
    tape: &mut Tape,
    arch: &Architecture,
    graph: &PreparedGraph,
    params: &ParamVars,
    mode: Mode,
) -> Result<Var> {
    let pooling = match &arch.encoder {
        Encoder::Raw => return Ok(tape.constant(graph.features.clone())),
        Encoder::Chebyshev { pooling, .. } => *pooling,
    };
    let mut h: Option<Var> = None;
    for (l, layer) in params.layers.iter().enumerate() {
        let conv = match h {
            None => cheb_conv_basis(tape, layer, &graph.basis)?,
            Some(x) => cheb_conv(tape, layer, &graph.lhat, x)?,
        };
        let act = tape.relu(conv)?;
        let pooled = match pooling {
            Pooling::Mean => tape.row_mean_over_neighbors(&graph.pool, act)?,
            Pooling::Max => max_pool(tape, act, &graph.neighborhoods)?,
        };
        h = Some(tape.dropout(pooled, arch.dropout, mode.site_seed(l), mode.train)?);
    }
    Ok(h.unwrap_or_else(|| tape.constant(graph.features.clone())))
}
