//! Self-checks of the numerical kernels against slow dense references.
//! Backs the `oracle-tests` and `gradcheck` commands.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check, AutodiffError, GradCheckReport, Tape, Var};
use crate::data::synthetic::toy8;
use crate::data::DatasetBundle;
use crate::graph::{transition_matrix, SparseGraph};
use crate::model::{
    cheb_conv, cheb_conv_basis, encode_nodes, normalized_weights, ChebLayerParams, Mode,
    PreparedGraph,
};
use crate::reachability::{dense_power_oracle, ReachabilityTable};
use crate::tensor::Tensor;
use crate::trainer::{Experiment, RunConfig, TrainError};

/// Largest observed error of one check and the tolerance it must meet.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub name: &'static str,
    pub error: f64,
    pub tolerance: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.error <= self.tolerance
    }
}

/// Erdős–Rényi style graph with random features, for oracle checks.
pub fn random_graph(n: usize, p: f64, d: usize, classes: usize, seed: u64) -> SparseGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.random_bool(p) {
                edges.push((i, j, 1.0));
            }
        }
    }
    let x = Tensor::from_vec(n, d, (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect());
    let labels = (0..n).map(|i| Some(i % classes)).collect();
    SparseGraph::from_edges(n, &edges, false, x, labels, classes).expect("valid random graph")
}

/// Sparse reachability table against dense matrix powers.
pub fn reachability_vs_dense_powers(graphs: usize, seed: u64) -> CheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..graphs {
        let n = rng.random_range(2..=40);
        let steps = rng.random_range(1..=6);
        let g = random_graph(n, rng.random_range(0.02..0.3), 1, 1, rng.random());
        let refs: Vec<usize> = (0..n).collect();
        let table = ReachabilityTable::build(&g, &refs, steps).expect("valid references");
        let powers = dense_power_oracle(&g, steps).expect("small graph");
        for r in 0..n {
            for j in 0..n {
                for (s, power) in powers.iter().enumerate() {
                    worst = worst.max((table.vector(r, j)[s] - power.get(r, j)).abs());
                }
            }
        }
    }
    CheckReport {
        name: "reachability vs dense powers",
        error: worst,
        tolerance: 1e-10,
    }
}

/// Row sums of the transition matrix: one for every node with an edge.
pub fn transition_rows_stochastic(graphs: usize, seed: u64) -> CheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..graphs {
        let n = rng.random_range(2..=60);
        let g = random_graph(n, rng.random_range(0.02..0.3), 1, 1, rng.random());
        let p = transition_matrix(&g);
        for r in 0..n {
            let (_, vals) = p.row(r);
            if !vals.is_empty() {
                worst = worst.max((vals.iter().sum::<f64>() - 1.0).abs());
            }
        }
    }
    CheckReport {
        name: "transition rows sum to one",
        error: worst,
        tolerance: 1e-12,
    }
}

fn dense_chebyshev(lhat: &Tensor, x: &Tensor, coeffs: &[Tensor], bias: &Tensor) -> Tensor {
    let n = lhat.rows();
    let mut terms = vec![x.clone(), lhat.matmul(x)];
    while terms.len() < coeffs.len() {
        let k = terms.len();
        let next = lhat.matmul(&terms[k - 1]).zip_map(&terms[k - 2], |a, b| 2.0 * a - b);
        terms.push(next);
    }
    let mut out = Tensor::zeros(n, bias.cols());
    for (t, theta) in terms.iter().zip(coeffs) {
        out = out.zip_map(&t.matmul(theta), |a, b| a + b);
    }
    for r in 0..n {
        for (v, b) in out.row_mut(r).iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
    out
}

/// Both Chebyshev convolution paths against the dense recursion.
pub fn chebyshev_vs_dense(graphs: usize, seed: u64) -> CheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..graphs {
        let n = rng.random_range(2..=32);
        let order = rng.random_range(1..=4);
        let g = random_graph(n, 0.2, 5, 1, rng.random());
        let prepared = PreparedGraph::new(&g, order, 2.0).expect("positive lambda");
        let mut rand_t = |r, c| {
            Tensor::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
        };
        let coeffs: Vec<Tensor> = (0..order).map(|_| rand_t(5, 3)).collect();
        let bias = rand_t(1, 3);
        let expected = dense_chebyshev(
            &prepared.scaled_laplacian().to_dense(),
            g.features(),
            &coeffs,
            &bias,
        );
        let mut tape = Tape::new();
        let layer = ChebLayerParams {
            coeffs: coeffs.iter().map(|c| tape.constant(c.clone())).collect(),
            bias: tape.constant(bias),
        };
        let x = tape.constant(g.features().clone());
        let a = cheb_conv(&mut tape, &layer, prepared.lhat_operator(), x).expect("shapes agree");
        let b = cheb_conv_basis(&mut tape, &layer, &prepared.basis).expect("shapes agree");
        worst = worst
            .max(tape.value(a).max_abs_diff(&expected))
            .max(tape.value(b).max_abs_diff(&expected));
    }
    CheckReport {
        name: "chebyshev vs dense recursion",
        error: worst,
        tolerance: 1e-10,
    }
}

/// Embeddings of a relabeled graph are the relabeled embeddings.
pub fn permutation_equivariance(seed: u64) -> CheckReport {
    let bundle = toy8();
    let cfg = RunConfig {
        widths: vec![6, 4],
        seed,
        ..RunConfig::default()
    };
    let exp = Experiment::new(&bundle, cfg.clone()).expect("toy config is valid");
    let params = exp.init_params();
    let g = &bundle.graph;
    let n = g.num_nodes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..n).collect();
    rand::seq::SliceRandom::shuffle(&mut perm[..], &mut rng);

    let embed = |graph: &SparseGraph| {
        let prepared = PreparedGraph::new(graph, cfg.cheb_order, cfg.lambda_max).expect("valid");
        let mut tape = Tape::new();
        let vars = params.constants(&mut tape);
        let e = encode_nodes(&mut tape, exp.architecture(), &prepared, &vars, Mode::EVAL)
            .expect("shapes agree");
        tape.value(e).clone()
    };
    let base = embed(g);
    let moved = embed(&g.permuted(&perm));
    let mut worst: f64 = 0.0;
    for old in 0..n {
        for (a, b) in base.row(old).iter().zip(moved.row(perm[old])) {
            worst = worst.max((a - b).abs());
        }
    }
    CheckReport {
        name: "permutation equivariance",
        error: worst,
        tolerance: 1e-10,
    }
}

/// Per-class normalized weights sum to one for random parameters.
pub fn normalization_sums(draws: usize, seed: u64) -> CheckReport {
    let bundle = toy8();
    let mut worst: f64 = 0.0;
    for i in 0..draws {
        let cfg = RunConfig {
            widths: vec![4],
            seed: seed.wrapping_add(i as u64),
            ..RunConfig::default()
        };
        let exp = Experiment::new(&bundle, cfg).expect("toy config is valid");
        let refs = exp.references().expect("relation readout");
        let queries: Vec<usize> = (0..bundle.graph.num_nodes()).collect();
        let w = normalized_weights(
            exp.architecture(),
            &exp.init_params(),
            exp.table(),
            refs,
            &queries,
            true,
        )
        .expect("valid inputs");
        for q in 0..queries.len() {
            for c in 0..refs.num_classes() {
                let s: f64 = refs.members(c).iter().map(|&k| w.get(q, k)).sum();
                worst = worst.max((s - 1.0).abs());
            }
        }
    }
    CheckReport {
        name: "normalized weights sum to one",
        error: worst,
        tolerance: 1e-9,
    }
}

/// Finite-difference check of the full model loss of `bundle` in eval mode,
/// scored over every labeled node with self-references excluded.
pub fn gil_grad_check(
    bundle: &DatasetBundle,
    config: RunConfig,
    coords_per_block: usize,
) -> Result<GradCheckReport, TrainError> {
    let exp = Experiment::new(bundle, config)?;
    let params = exp.init_params();
    let blocks: Vec<Tensor> = params.blocks().into_iter().cloned().collect();
    let queries: Vec<usize> = (0..bundle.graph.num_nodes())
        .filter(|&i| bundle.graph.label(i).is_some())
        .collect();
    let forward = |tape: &mut Tape, vars: &[Var]| {
        let pv = params.with_blocks(vars.to_vec());
        exp.loss(tape, &pv, &queries, true, Mode::EVAL).map_err(|e| match e {
            TrainError::Model(crate::model::ModelError::Autodiff(a)) => a,
            other => AutodiffError::InvalidArgument {
                op: "forward",
                reason: other.to_string(),
            },
        })
    };
    Ok(grad_check(forward, &blocks, 1e-4, coords_per_block, exp.config().seed)?)
}

/// Gradient check of the full model on the 8-node toy graph.
pub fn toy_grad_check(seed: u64) -> CheckReport {
    let cfg = RunConfig {
        widths: vec![6, 4],
        phi_w_hidden: 5,
        seed,
        ..RunConfig::default()
    };
    let error = gil_grad_check(&toy8(), cfg, usize::MAX)
        .map(|r| r.max_rel_error)
        .unwrap_or(f64::INFINITY);
    CheckReport {
        name: "full-model gradient check",
        error,
        tolerance: 1e-4,
    }
}

/// Every check with its default sizes.
pub fn oracle_suite(seed: u64) -> Vec<CheckReport> {
    vec![
        reachability_vs_dense_powers(50, seed),
        transition_rows_stochastic(50, seed),
        chebyshev_vs_dense(20, seed),
        permutation_equivariance(seed),
        normalization_sums(20, seed),
        toy_grad_check(seed),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        for report in oracle_suite(3) {
            assert!(report.passed(), "{report:?}");
        }
    }
}
