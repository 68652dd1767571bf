//! The GIL network: a Chebyshev node encoder, the reachability weigher and
//! the class-to-node relation head.
//!
//! For query `j` and class `c` the relation head scores
//!
//! ```text
//! s_cj = [ Σ_{i∈c} n_ij e_i | e_j ] · W_r[:, c] + b_c,   n_ij = w_ij / Σ_{i'∈c} w_i'j
//! ```
//!
//! where `w_ij = φ_w(reach(i, j))` and `e` are node embeddings. Splitting `W_r`
//! into its aggregate and query blocks lets the per-class aggregates be folded
//! into two matrix products instead of materializing a `|Q|×C×h` tensor.

mod encoder;
mod params;
mod scores;

use thiserror::Error;

use crate::autodiff::AutodiffError;
use crate::graph::{mean_pool_matrix, normalized_laplacian, scaled_laplacian, GraphError, SparseGraph};
use crate::sparse::{SparseMatrix, SparseOperator};
use crate::tensor::Tensor;

pub use encoder::{cheb_conv, cheb_conv_basis, encode_nodes};
pub use params::{ChebLayerParams, GilParameters, Head, ParamVars, Params};
pub use scores::{
    class_aggregates, class_scores, forward, linear_scores, normalize, normalized_weights,
    phi_w_forward, predict, reference_weights, References, ScoreVector, WEIGHT_SUM_FLOOR,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("class {0} has no reference node")]
    EmptyClass(usize),
    #[error("reference node {0} is unlabeled")]
    UnlabeledReference(usize),
    #[error("reachability table does not cover reference {0}")]
    MissingReference(usize),
    #[error("learned weighting needs a reachability table")]
    MissingTable,
    #[error("architecture has {expected} reachability steps but the table has {got}")]
    StepMismatch { expected: usize, got: usize },
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pooling {
    /// Mean over the closed one-hop neighborhood.
    Mean,
    /// Entrywise max over the closed one-hop neighborhood.
    Max,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Encoder {
    Chebyshev {
        widths: Vec<usize>,
        order: usize,
        pooling: Pooling,
    },
    /// Raw node attributes, no trainable encoder.
    Raw,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Weighting {
    /// Learned `φ_w` over reachability vectors.
    Reachability,
    /// Every reference weighs 1 before normalization.
    Uniform,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Readout {
    Relation(Weighting),
    /// Per-node linear classifier on the embeddings (plain GCN).
    Linear,
}

/// Shapes and switches fixing the network layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    pub feature_dim: usize,
    pub num_classes: usize,
    pub encoder: Encoder,
    pub readout: Readout,
    /// Reachability horizon `d_p`, the input width of `φ_w`.
    pub steps: usize,
    pub phi_w_hidden: usize,
    pub dropout: f64,
}

impl Architecture {
    pub fn embedding_dim(&self) -> usize {
        match &self.encoder {
            Encoder::Chebyshev { widths, .. } => *widths.last().unwrap_or(&self.feature_dim),
            Encoder::Raw => self.feature_dim,
        }
    }

    pub fn uses_reachability(&self) -> bool {
        self.readout == Readout::Relation(Weighting::Reachability)
    }
}

/// Whether dropout is active, and the seed its masks derive from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Mode {
    pub train: bool,
    pub seed: u64,
}

impl Mode {
    pub const EVAL: Mode = Mode {
        train: false,
        seed: 0,
    };

    pub fn train(seed: u64) -> Self {
        Self { train: true, seed }
    }

    /// Seed for the dropout site following layer `layer`.
    pub(crate) fn site_seed(self, layer: usize) -> u64 {
        mix_seed(&[self.seed, layer as u64])
    }
}

/// SplitMix64 fold of several integers into one seed.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut state: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        state = state.wrapping_add(p).wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        state = z ^ (z >> 31);
    }
    state
}

/// Graph operators shared by every forward pass.
#[derive(Clone, Debug)]
pub struct PreparedGraph {
    pub(crate) lhat: SparseOperator,
    pub(crate) pool: SparseOperator,
    pub(crate) neighborhoods: Vec<Vec<usize>>,
    /// `T_k(L̂)·X` for each order, so the first convolution only multiplies a
    /// constant sparse matrix by its coefficients.
    pub(crate) basis: Vec<SparseOperator>,
    pub(crate) features: Tensor,
}

impl PreparedGraph {
    pub fn new(g: &SparseGraph, order: usize, lambda_max: f64) -> Result<Self> {
        let lhat = scaled_laplacian(&normalized_laplacian(g), lambda_max)?;
        let x = SparseMatrix::from_dense(g.features());
        let mut terms: Vec<SparseMatrix> = Vec::with_capacity(order);
        for k in 0..order {
            let next = match k {
                0 => x.clone(),
                1 => lhat.mul_sparse(&x),
                _ => lhat
                    .mul_sparse(&terms[k - 1])
                    .scale(2.0)
                    .add(&terms[k - 2].scale(-1.0)),
            };
            terms.push(next);
        }
        let lhat = if g.is_directed() {
            SparseOperator::new(lhat)
        } else {
            SparseOperator::symmetric(lhat)
        };
        Ok(Self {
            lhat,
            pool: SparseOperator::new(mean_pool_matrix(g)),
            neighborhoods: crate::graph::closed_neighborhoods(g),
            basis: terms.into_iter().map(SparseOperator::new).collect(),
            features: g.features().clone(),
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.features.rows()
    }

    pub fn scaled_laplacian(&self) -> &SparseMatrix {
        self.lhat.matrix()
    }

    pub fn lhat_operator(&self) -> &SparseOperator {
        &self.lhat
    }

    /// `T_k(L̂)·X` for `k = 0..order`.
    pub fn basis(&self) -> &[SparseOperator] {
        &self.basis
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }
}
