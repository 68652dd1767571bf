//! Reachability weighting, per-class normalization and the score heads.

use std::sync::Once;

use super::{
    encode_nodes, Architecture, GilParameters, Head, Mode, ModelError, ParamVars, PreparedGraph,
    Readout, Result, Weighting,
};
use crate::autodiff::{softmax_rows, Tape, Var};
use crate::graph::SparseGraph;
use crate::reachability::ReachabilityTable;
use crate::tensor::Tensor;

/// Class weight sums below this trigger the uniform fallback.
pub const WEIGHT_SUM_FLOOR: f64 = 1e-8;

/// Labeled reference nodes grouped by class.
#[derive(Clone, Debug, PartialEq)]
pub struct References {
    ids: Vec<usize>,
    classes: Vec<usize>,
    members: Vec<Vec<usize>>,
    /// `m × C` one-hot class membership.
    onehot: Tensor,
}

impl References {
    /// Every class must have at least one reference.
    pub fn new(g: &SparseGraph, ids: &[usize]) -> Result<Self> {
        let c = g.num_classes();
        let mut classes = Vec::with_capacity(ids.len());
        let mut members = vec![Vec::new(); c];
        let mut onehot = Tensor::zeros(ids.len(), c);
        for (k, &id) in ids.iter().enumerate() {
            let label = g.label(id).ok_or(ModelError::UnlabeledReference(id))?;
            classes.push(label);
            members[label].push(k);
            onehot.set(k, label, 1.0);
        }
        if let Some(empty) = members.iter().position(Vec::is_empty) {
            return Err(ModelError::EmptyClass(empty));
        }
        Ok(Self {
            ids: ids.to_vec(),
            classes,
            members,
            onehot,
        })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.members.len()
    }

    /// Class of the `k`-th reference.
    pub fn class_of(&self, k: usize) -> usize {
        self.classes[k]
    }

    /// Positions (not node ids) of the references in class `c`.
    pub fn members(&self, c: usize) -> &[usize] {
        &self.members[c]
    }

    pub fn onehot(&self) -> &Tensor {
        &self.onehot
    }
}

fn affine_relu(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let h = tape.matmul(x, w)?;
    let h = tape.add_bias(h, b)?;
    Ok(tape.relu(h)?)
}

/// `φ_w` on a stack of reachability vectors (one per row), giving a column
/// of weights in `(0, 1)`.
fn phi_w_rows(tape: &mut Tape, phi: &[Var], x: Var) -> Result<Var> {
    let h = affine_relu(tape, x, phi[0], phi[1])?;
    let h = affine_relu(tape, h, phi[2], phi[3])?;
    let out = tape.matmul(h, phi[4])?;
    let out = tape.add_bias(out, phi[5])?;
    Ok(tape.sigmoid(out)?)
}

/// `φ_w` applied to a single reachability vector.
pub fn phi_w_forward(params: &GilParameters, reach: &[f64]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = params.constants(&mut tape);
    let x = tape.constant(Tensor::row_vector(reach.to_vec()));
    let w = phi_w_rows(&mut tape, &vars.phi_w, x)?;
    Ok(tape.value(w).item())
}

/// Raw weights `w_{i→j}` as a `|queries| × m` value: `φ_w` of the
/// reachability vectors, or ones for uniform weighting.
pub fn reference_weights(
    tape: &mut Tape,
    arch: &Architecture,
    params: &ParamVars,
    table: Option<&ReachabilityTable>,
    refs: &References,
    queries: &[usize],
) -> Result<Var> {
    let m = refs.len();
    match arch.readout {
        Readout::Relation(Weighting::Reachability) => {
            let table = table.ok_or(ModelError::MissingTable)?;
            if table.steps() != arch.steps {
                return Err(ModelError::StepMismatch {
                    expected: arch.steps,
                    got: table.steps(),
                });
            }
            let rows: Vec<usize> = refs
                .ids()
                .iter()
                .map(|&id| table.reference_index(id).ok_or(ModelError::MissingReference(id)))
                .collect::<Result<_>>()?;
            let mut data = Vec::with_capacity(queries.len() * m * arch.steps);
            for &q in queries {
                for &k in &rows {
                    data.extend_from_slice(table.vector(k, q));
                }
            }
            let x = tape.constant(Tensor::from_vec(queries.len() * m, arch.steps, data));
            let w = phi_w_rows(tape, &params.phi_w, x)?;
            Ok(tape.reshape(w, queries.len(), m)?)
        }
        _ => Ok(tape.constant(Tensor::ones(queries.len(), m))),
    }
}

/// Normalizes raw weights within each class so they sum to one per query.
///
/// With `exclude_self`, the weight of a reference on itself is zeroed first.
/// A class whose remaining weights sum below [`WEIGHT_SUM_FLOOR`] falls back
/// to uniform weights over its surviving references, or over all of its
/// references if none survive.
pub fn normalize(
    tape: &mut Tape,
    raw: Var,
    refs: &References,
    queries: &[usize],
    exclude_self: bool,
) -> Result<Var> {
    let m = refs.len();
    let c = refs.num_classes();
    let mut mask = Tensor::ones(queries.len(), m);
    let mut masked_any = false;
    if exclude_self {
        for (qi, &q) in queries.iter().enumerate() {
            for (k, &id) in refs.ids().iter().enumerate() {
                if id == q {
                    mask.set(qi, k, 0.0);
                    masked_any = true;
                }
            }
        }
    }
    let masked = if masked_any {
        let mk = tape.constant(mask.clone());
        tape.mul(raw, mk)?
    } else {
        raw
    };

    let sums = tape.value(masked).matmul(refs.onehot());
    let mut keep = Tensor::ones(queries.len(), m);
    let mut fill = Tensor::zeros(queries.len(), m);
    let mut fallback = false;
    for qi in 0..queries.len() {
        for class in 0..c {
            if sums.get(qi, class) >= WEIGHT_SUM_FLOOR {
                continue;
            }
            fallback = true;
            let members = refs.members(class);
            let survivors = members.iter().any(|&k| mask.get(qi, k) != 0.0);
            if !survivors {
                static WARNED: Once = Once::new();
                WARNED.call_once(|| {
                    log::warn!(
                        "query {} is the only reference of class {class}; keeping its self \
                         weight (reported once)",
                        queries[qi]
                    )
                });
            }
            for &k in members {
                keep.set(qi, k, 0.0);
                if !survivors || mask.get(qi, k) != 0.0 {
                    fill.set(qi, k, 1.0);
                }
            }
        }
    }
    let effective = if fallback {
        let keep = tape.constant(keep);
        let kept = tape.mul(masked, keep)?;
        let fill = tape.constant(fill);
        tape.add(kept, fill)?
    } else {
        masked
    };

    let onehot = tape.constant(refs.onehot().clone());
    let class_sums = tape.matmul(effective, onehot)?;
    let spread = tape.matmul_t(class_sums, onehot, false, true)?;
    let inv = tape.reciprocal(spread)?;
    Ok(tape.mul(effective, inv)?)
}

/// Relation head over normalized weights `n` (`|queries| × m`).
fn relation_head(
    tape: &mut Tape,
    params: &ParamVars,
    normalized: Var,
    embeddings: Var,
    refs: &References,
    queries: &[usize],
) -> Result<Var> {
    let Head::Relation {
        w_agg,
        w_query,
        bias,
    } = params.head
    else {
        unreachable!("relation readout carries a relation head")
    };
    // Row j, column c of N·((E_R·W_agg) ⊙ M) is aggregate_{c→j} · W_agg[:, c].
    let e_ref = tape.gather_rows(embeddings, refs.ids())?;
    let per_ref = tape.matmul(e_ref, w_agg)?;
    let onehot = tape.constant(refs.onehot().clone());
    let per_ref = tape.mul(per_ref, onehot)?;
    let agg_part = tape.matmul(normalized, per_ref)?;
    let e_query = tape.gather_rows(embeddings, queries)?;
    let query_part = tape.matmul(e_query, w_query)?;
    let scores = tape.add(agg_part, query_part)?;
    Ok(tape.add_bias(scores, bias)?)
}

/// Class-to-node scores `|queries| × C` from precomputed embeddings.
#[allow(clippy::too_many_arguments)]
pub fn class_scores(
    tape: &mut Tape,
    arch: &Architecture,
    params: &ParamVars,
    embeddings: Var,
    table: Option<&ReachabilityTable>,
    refs: &References,
    queries: &[usize],
    exclude_self: bool,
) -> Result<Var> {
    let raw = reference_weights(tape, arch, params, table, refs, queries)?;
    let normalized = normalize(tape, raw, refs, queries, exclude_self)?;
    relation_head(tape, params, normalized, embeddings, refs, queries)
}

/// Per-node logits of the plain classifier head.
pub fn linear_scores(
    tape: &mut Tape,
    params: &ParamVars,
    embeddings: Var,
    queries: &[usize],
) -> Result<Var> {
    let Head::Linear { weight, bias } = params.head else {
        unreachable!("linear readout carries a linear head")
    };
    let e = tape.gather_rows(embeddings, queries)?;
    let logits = tape.matmul(e, weight)?;
    Ok(tape.add_bias(logits, bias)?)
}

/// Full forward pass: encode every node, then score `queries`.
#[allow(clippy::too_many_arguments)]
pub fn forward(
    tape: &mut Tape,
    arch: &Architecture,
    graph: &PreparedGraph,
    params: &ParamVars,
    table: Option<&ReachabilityTable>,
    refs: &References,
    queries: &[usize],
    exclude_self: bool,
    mode: Mode,
) -> Result<Var> {
    let embeddings = encode_nodes(tape, arch, graph, params, mode)?;
    match arch.readout {
        Readout::Linear => linear_scores(tape, params, embeddings, queries),
        Readout::Relation(_) => {
            class_scores(tape, arch, params, embeddings, table, refs, queries, exclude_self)
        }
    }
}

/// Normalized weights as a plain `|queries| × m` tensor.
pub fn normalized_weights(
    arch: &Architecture,
    params: &GilParameters,
    table: Option<&ReachabilityTable>,
    refs: &References,
    queries: &[usize],
    exclude_self: bool,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = params.constants(&mut tape);
    let raw = reference_weights(&mut tape, arch, &vars, table, refs, queries)?;
    let n = normalize(&mut tape, raw, refs, queries, exclude_self)?;
    Ok(tape.value(n).clone())
}

/// Weighted class aggregates `Σ_{i∈c} n_ij e_i`, one `|queries| × h` tensor
/// per class. Diagnostic counterpart of the fused head.
pub fn class_aggregates(normalized: &Tensor, refs: &References, embeddings: &Tensor) -> Vec<Tensor> {
    let e_ref = embeddings.gather_rows(refs.ids());
    (0..refs.num_classes())
        .map(|c| {
            let mut w = normalized.clone();
            for q in 0..w.rows() {
                for k in 0..w.cols() {
                    if refs.class_of(k) != c {
                        w.set(q, k, 0.0);
                    }
                }
            }
            w.matmul(&e_ref)
        })
        .collect()
}

/// Scores with their softmax probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreVector {
    pub scores: Tensor,
    pub probs: Tensor,
}

impl ScoreVector {
    pub fn new(scores: Tensor) -> Self {
        let probs = softmax_rows(&scores);
        Self { scores, probs }
    }

    pub fn predictions(&self) -> Vec<usize> {
        (0..self.scores.rows())
            .map(|r| predict(self.scores.row(r)))
            .collect()
    }
}

/// Index of the largest score; ties go to the smallest index.
pub fn predict(scores: &[f64]) -> usize {
    let mut best = 0;
    for (c, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = c;
        }
    }
    best
}
