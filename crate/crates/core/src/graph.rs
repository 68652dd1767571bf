//! Sparse graphs and the operators derived from them: degrees, the normalized
//! and scaled Laplacians, the random-walk transition matrix, and the
//! neighborhood-mean pooling operator.
//!
//! Zero-degree nodes get `D^{-1/2} = D^{-1} = 0`, so their Laplacian row is the
//! identity row and their transition row is empty.

use std::collections::VecDeque;

use thiserror::Error;

use crate::sparse::{CsrError, SparseMatrix};
use crate::tensor::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error(transparent)]
    Csr(#[from] CsrError),
    #[error("adjacency must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("self-loop stored at node {0}")]
    SelfLoop(usize),
    #[error("negative or non-finite edge weight {weight} on ({from}, {to})")]
    BadWeight { from: usize, to: usize, weight: f64 },
    #[error("undirected graph has weight({from},{to}) != weight({to},{from})")]
    Asymmetric { from: usize, to: usize },
    #[error("edge ({from}, {to}) references a node outside 0..{n}")]
    DanglingEdge { from: usize, to: usize, n: usize },
    #[error("feature matrix has {got} rows for {n} nodes")]
    FeatureRows { got: usize, n: usize },
    #[error("label vector has {got} entries for {n} nodes")]
    LabelCount { got: usize, n: usize },
    #[error("node {node} has label {label} but there are only {num_classes} classes")]
    LabelOutOfRange {
        node: usize,
        label: usize,
        num_classes: usize,
    },
    #[error("lambda_max must be positive, got {0}")]
    NonPositiveLambdaMax(f64),
}

/// Immutable attributed graph with CSR adjacency.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseGraph {
    adjacency: SparseMatrix,
    features: Tensor,
    labels: Vec<Option<usize>>,
    num_classes: usize,
    directed: bool,
}

impl SparseGraph {
    /// Wraps a validated adjacency matrix together with node data.
    pub fn new(
        adjacency: SparseMatrix,
        features: Tensor,
        labels: Vec<Option<usize>>,
        num_classes: usize,
        directed: bool,
    ) -> Result<Self, GraphError> {
        let (rows, cols) = adjacency.shape();
        if rows != cols {
            return Err(GraphError::NotSquare { rows, cols });
        }
        let n = rows;
        for r in 0..n {
            let (nbrs, weights) = adjacency.row(r);
            for (&c, &w) in nbrs.iter().zip(weights) {
                if c == r {
                    return Err(GraphError::SelfLoop(r));
                }
                if !(w.is_finite() && w >= 0.0) {
                    return Err(GraphError::BadWeight {
                        from: r,
                        to: c,
                        weight: w,
                    });
                }
                if !directed && adjacency.get(c, r) != w {
                    return Err(GraphError::Asymmetric { from: r, to: c });
                }
            }
        }
        if features.rows() != n {
            return Err(GraphError::FeatureRows {
                got: features.rows(),
                n,
            });
        }
        if labels.len() != n {
            return Err(GraphError::LabelCount {
                got: labels.len(),
                n,
            });
        }
        for (node, label) in labels.iter().enumerate() {
            if let Some(label) = *label {
                if label >= num_classes {
                    return Err(GraphError::LabelOutOfRange {
                        node,
                        label,
                        num_classes,
                    });
                }
            }
        }
        Ok(Self {
            adjacency,
            features,
            labels,
            num_classes,
            directed,
        })
    }

    /// Builds a graph from an edge list.
    ///
    /// Self-loops are dropped, repeated edges are merged keeping the largest
    /// weight, and undirected input is symmetrized.
    pub fn from_edges(
        n: usize,
        edges: &[(usize, usize, f64)],
        directed: bool,
        features: Tensor,
        labels: Vec<Option<usize>>,
        num_classes: usize,
    ) -> Result<Self, GraphError> {
        let mut triplets = Vec::with_capacity(edges.len() * 2);
        for &(from, to, weight) in edges {
            if from >= n || to >= n {
                return Err(GraphError::DanglingEdge { from, to, n });
            }
            if !(weight.is_finite() && weight >= 0.0) {
                return Err(GraphError::BadWeight { from, to, weight });
            }
            if from == to {
                continue;
            }
            triplets.push((from, to, weight));
            if !directed {
                triplets.push((to, from, weight));
            }
        }
        triplets.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)).then(a.2.total_cmp(&b.2)));
        // Keep the last (largest) weight of each run of equal coordinates.
        let mut merged: Vec<(usize, usize, f64)> = Vec::with_capacity(triplets.len());
        for t in triplets {
            match merged.last_mut() {
                Some(last) if (last.0, last.1) == (t.0, t.1) => last.2 = t.2,
                _ => merged.push(t),
            }
        }
        let adjacency = SparseMatrix::from_triplets(n, n, &merged);
        Self::new(adjacency, features, labels, num_classes, directed)
    }

    #[inline]
    pub fn num_nodes(&self) -> usize {
        self.adjacency.rows()
    }

    /// Number of stored (directed) adjacency entries.
    pub fn num_stored_edges(&self) -> usize {
        self.adjacency.nnz()
    }

    pub fn adjacency(&self) -> &SparseMatrix {
        &self.adjacency
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn labels(&self) -> &[Option<usize>] {
        &self.labels
    }

    pub fn label(&self, node: usize) -> Option<usize> {
        self.labels[node]
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn is_directed(&self) -> bool {
        self.directed
    }

    pub fn neighbors(&self, node: usize) -> &[usize] {
        self.adjacency.row(node).0
    }

    /// Same graph with features replaced (used for row normalization).
    pub fn with_features(&self, features: Tensor) -> Result<Self, GraphError> {
        Self::new(
            self.adjacency.clone(),
            features,
            self.labels.clone(),
            self.num_classes,
            self.directed,
        )
    }

    /// Relabels nodes so that old node `i` becomes `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.num_nodes();
        assert_eq!(perm.len(), n, "permutation length");
        let mut triplets = Vec::with_capacity(self.adjacency.nnz());
        for r in 0..n {
            let (cols, vals) = self.adjacency.row(r);
            triplets.extend(cols.iter().zip(vals).map(|(&c, &v)| (perm[r], perm[c], v)));
        }
        let mut features = Tensor::zeros(n, self.feature_dim());
        let mut labels = vec![None; n];
        for old in 0..n {
            features.row_mut(perm[old]).copy_from_slice(self.features.row(old));
            labels[perm[old]] = self.labels[old];
        }
        Self {
            adjacency: SparseMatrix::from_triplets(n, n, &triplets),
            features,
            labels,
            num_classes: self.num_classes,
            directed: self.directed,
        }
    }

    /// Unweighted hop distance from the nearest of `sources` to every node;
    /// `None` for unreachable nodes.
    pub fn bfs_distances(&self, sources: &[usize]) -> Vec<Option<usize>> {
        let n = self.num_nodes();
        let mut dist = vec![None; n];
        let mut queue = VecDeque::new();
        for &s in sources {
            if dist[s].is_none() {
                dist[s] = Some(0);
                queue.push_back(s);
            }
        }
        while let Some(u) = queue.pop_front() {
            let du = dist[u].expect("queued nodes have a distance");
            for &v in self.neighbors(u) {
                if dist[v].is_none() {
                    dist[v] = Some(du + 1);
                    queue.push_back(v);
                }
            }
        }
        dist
    }
}

/// Weighted degree of every node.
pub fn degree_vector(g: &SparseGraph) -> Vec<f64> {
    g.adjacency.row_sums()
}

fn inv_sqrt_or_zero(d: f64) -> f64 {
    if d > 0.0 {
        1.0 / d.sqrt()
    } else {
        0.0
    }
}

/// `I − D^{-1/2} E D^{-1/2}`.
pub fn normalized_laplacian(g: &SparseGraph) -> SparseMatrix {
    let scale: Vec<f64> = degree_vector(g).into_iter().map(inv_sqrt_or_zero).collect();
    let n = g.num_nodes();
    let mut triplets = Vec::with_capacity(g.adjacency.nnz() + n);
    for (r, &sr) in scale.iter().enumerate() {
        triplets.push((r, r, 1.0));
        let (cols, vals) = g.adjacency.row(r);
        for (&c, &w) in cols.iter().zip(vals) {
            triplets.push((r, c, -sr * w * scale[c]));
        }
    }
    SparseMatrix::from_triplets(n, n, &triplets)
}

/// `2L/λ_max − I`.
pub fn scaled_laplacian(laplacian: &SparseMatrix, lambda_max: f64) -> Result<SparseMatrix, GraphError> {
    if !(lambda_max > 0.0) {
        return Err(GraphError::NonPositiveLambdaMax(lambda_max));
    }
    Ok(laplacian.scale_add_identity(2.0 / lambda_max, -1.0))
}

/// Row-stochastic `D^{-1} E`; zero-degree rows stay empty.
pub fn transition_matrix(g: &SparseGraph) -> SparseMatrix {
    let degrees = degree_vector(g);
    let adj = &g.adjacency;
    let values: Vec<f64> = (0..g.num_nodes())
        .flat_map(|r| {
            let inv = if degrees[r] > 0.0 { 1.0 / degrees[r] } else { 0.0 };
            adj.row(r).1.iter().map(move |w| w * inv)
        })
        .collect();
    SparseMatrix::try_new(
        adj.rows(),
        adj.cols(),
        adj.indptr().to_vec(),
        adj.indices().to_vec(),
        values,
    )
    .expect("transition matrix shares the adjacency pattern")
}

/// Row-normalized `(A + I)` pattern: each row averages a node with its
/// one-hop neighbors, ignoring edge weights.
pub fn mean_pool_matrix(g: &SparseGraph) -> SparseMatrix {
    let n = g.num_nodes();
    let mut triplets = Vec::with_capacity(g.adjacency.nnz() + n);
    for r in 0..n {
        let nbrs = g.neighbors(r);
        let w = 1.0 / (nbrs.len() + 1) as f64;
        triplets.push((r, r, w));
        triplets.extend(nbrs.iter().map(|&c| (r, c, w)));
    }
    SparseMatrix::from_triplets(n, n, &triplets)
}

/// Each node's closed one-hop neighborhood (itself plus neighbors), sorted.
pub fn closed_neighborhoods(g: &SparseGraph) -> Vec<Vec<usize>> {
    (0..g.num_nodes())
        .map(|r| {
            let mut hood: Vec<usize> = g.neighbors(r).to_vec();
            let at = hood.partition_point(|&c| c < r);
            hood.insert(at, r);
            hood
        })
        .collect()
}

/// Largest eigenvalue of a symmetric operator by power iteration.
///
/// The start vector is deterministic; iteration stops once the Rayleigh
/// quotient moves by less than `tol` between steps.
pub fn estimate_lambda_max(m: &SparseMatrix, max_iters: usize, tol: f64) -> f64 {
    let n = m.rows();
    if n == 0 {
        return 0.0;
    }
    // Non-constant start so the constant eigenvector does not trap the
    // iteration when it happens to be an eigenvector.
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 + ((i * 7919) % 13) as f64 / 13.0).collect();
    let norm = |x: &[f64]| x.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = norm(&v);
    v.iter_mut().for_each(|a| *a /= nv);
    let mut lambda = 0.0;
    for _ in 0..max_iters {
        let x = Tensor::from_vec(n, 1, v.clone());
        let w = m.mul_dense(&x).into_vec();
        let next: f64 = v.iter().zip(&w).map(|(a, b)| a * b).sum();
        let nw = norm(&w);
        if nw == 0.0 {
            return 0.0;
        }
        v = w.into_iter().map(|a| a / nw).collect();
        let done = (next - lambda).abs() < tol;
        lambda = next;
        if done {
            break;
        }
    }
    lambda
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub fn unlabeled(n: usize, edges: &[(usize, usize)]) -> SparseGraph {
        let e: Vec<_> = edges.iter().map(|&(a, b)| (a, b, 1.0)).collect();
        SparseGraph::from_edges(n, &e, false, Tensor::zeros(n, 1), vec![None; n], 1).unwrap()
    }

    pub fn path(n: usize) -> SparseGraph {
        let edges: Vec<_> = (1..n).map(|i| (i - 1, i)).collect();
        unlabeled(n, &edges)
    }

    pub fn triangle() -> SparseGraph {
        unlabeled(3, &[(0, 1), (1, 2), (0, 2)])
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;

    #[test]
    fn degrees_of_small_graphs() {
        assert_eq!(degree_vector(&path(2)), vec![1.0, 1.0]);
        assert_eq!(degree_vector(&triangle()), vec![2.0, 2.0, 2.0]);
        let g = unlabeled(3, &[(0, 1)]);
        assert_eq!(degree_vector(&g)[2], 0.0);
    }

    #[test]
    fn normalized_laplacian_examples() {
        let l = normalized_laplacian(&path(2)).to_dense();
        assert_eq!(l, Tensor::from_rows(&[vec![1.0, -1.0], vec![-1.0, 1.0]]));
        let l = normalized_laplacian(&triangle()).to_dense();
        for i in 0..3 {
            for j in 0..3 {
                let expected = if i == j { 1.0 } else { -0.5 };
                assert!((l.get(i, j) - expected).abs() < 1e-15);
            }
        }
        let l = normalized_laplacian(&unlabeled(1, &[])).to_dense();
        assert_eq!(l, Tensor::from_rows(&[vec![1.0]]));
    }

    #[test]
    fn scaled_laplacian_examples() {
        let l = normalized_laplacian(&path(2));
        let s = scaled_laplacian(&l, 2.0).unwrap().to_dense();
        assert_eq!(s, Tensor::from_rows(&[vec![0.0, -1.0], vec![-1.0, 0.0]]));
        let iso = normalized_laplacian(&unlabeled(3, &[]));
        let s = scaled_laplacian(&iso, 2.0).unwrap().to_dense();
        assert_eq!(s, Tensor::zeros(3, 3));
        let s = scaled_laplacian(&normalized_laplacian(&triangle()), 2.0).unwrap().to_dense();
        for i in 0..3 {
            for j in 0..3 {
                let expected = if i == j { 0.0 } else { -0.5 };
                assert!((s.get(i, j) - expected).abs() < 1e-15);
            }
        }
        assert_eq!(
            scaled_laplacian(&l, 0.0).unwrap_err(),
            GraphError::NonPositiveLambdaMax(0.0)
        );
        assert!(scaled_laplacian(&l, -1.0).is_err());
    }

    #[test]
    fn transition_matrix_examples() {
        let p = transition_matrix(&path(3)).to_dense();
        assert_eq!(
            p,
            Tensor::from_rows(&[vec![0.0, 1.0, 0.0], vec![0.5, 0.0, 0.5], vec![0.0, 1.0, 0.0]])
        );
        let p = transition_matrix(&triangle()).to_dense();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(p.get(i, j), if i == j { 0.0 } else { 0.5 });
            }
        }
        let p = transition_matrix(&unlabeled(3, &[(0, 1)]));
        assert!(p.row(2).0.is_empty());
    }

    #[test]
    fn from_edges_symmetrizes_and_drops_loops() {
        let e = [(0, 1, 1.0), (1, 0, 1.0), (1, 1, 1.0), (1, 2, 2.0)];
        let g = SparseGraph::from_edges(3, &e, false, Tensor::zeros(3, 1), vec![None; 3], 1).unwrap();
        assert_eq!(g.num_stored_edges(), 4);
        assert_eq!(g.adjacency().get(2, 1), 2.0);
        assert_eq!(g.adjacency().get(1, 1), 0.0);
    }

    #[test]
    fn constructor_validation() {
        let e = [(0, 5, 1.0)];
        let err = SparseGraph::from_edges(3, &e, false, Tensor::zeros(3, 1), vec![None; 3], 1);
        assert!(matches!(err, Err(GraphError::DanglingEdge { .. })));
        let err = SparseGraph::from_edges(2, &[], false, Tensor::zeros(2, 1), vec![Some(3), None], 2);
        assert!(matches!(err, Err(GraphError::LabelOutOfRange { node: 0, .. })));
        let asym = SparseMatrix::from_triplets(2, 2, &[(0, 1, 1.0)]);
        let err = SparseGraph::new(asym, Tensor::zeros(2, 1), vec![None; 2], 1, false);
        assert!(matches!(err, Err(GraphError::Asymmetric { .. })));
        let looped = SparseMatrix::from_triplets(2, 2, &[(1, 1, 1.0)]);
        let err = SparseGraph::new(looped, Tensor::zeros(2, 1), vec![None; 2], 1, true);
        assert_eq!(err.unwrap_err(), GraphError::SelfLoop(1));
    }

    #[test]
    fn mean_pool_rows_average_closed_neighborhood() {
        let m = mean_pool_matrix(&path(3)).to_dense();
        assert_eq!(m.row(0), &[0.5, 0.5, 0.0]);
        let third = 1.0 / 3.0;
        assert_eq!(m.row(1), &[third, third, third]);
        let iso = mean_pool_matrix(&unlabeled(1, &[])).to_dense();
        assert_eq!(iso.data(), &[1.0]);
        assert_eq!(closed_neighborhoods(&path(3))[1], vec![0, 1, 2]);
    }

    #[test]
    fn power_iteration_finds_top_eigenvalue() {
        // Normalized Laplacian of a bipartite graph has eigenvalue exactly 2.
        let l = normalized_laplacian(&path(4));
        let lambda = estimate_lambda_max(&l, 500, 1e-12);
        assert!((lambda - 2.0).abs() < 1e-6, "{lambda}");
    }

    #[test]
    fn bfs_marks_unreachable_nodes() {
        let g = unlabeled(4, &[(0, 1), (1, 2)]);
        assert_eq!(g.bfs_distances(&[0]), vec![Some(0), Some(1), Some(2), None]);
        assert_eq!(g.bfs_distances(&[0, 2]), vec![Some(0), Some(1), Some(0), None]);
    }
}
