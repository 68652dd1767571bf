//! Random-walk reachability between reference nodes and every other node.
//!
//! For a reference `i` and node `j` the reachability vector is
//! `[P_ij, P²_ij, …, P^{d_p}_ij]` with `P = D⁻¹E`. Rows of `P^t` are obtained by
//! `d_p` successive vector–matrix products starting from the indicator of
//! `i`, so no matrix power is ever formed.

use std::collections::HashMap;
use std::fs;
use std::io;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::bytes::ByteCursor;
use crate::graph::{transition_matrix, SparseGraph};
use crate::hash::Fnv1a;
use crate::sparse::SparseMatrix;
use crate::tensor::Tensor;

/// Step horizons are clamped into this range.
pub const MIN_STEPS: usize = 2;
pub const MAX_STEPS: usize = 10;
/// Graphs up to this size are searched from every node when estimating `d_p`.
pub const FULL_BFS_LIMIT: usize = 5_000;
/// Largest graph the dense power oracle accepts.
pub const DENSE_ORACLE_LIMIT: usize = 64;

const CACHE_MAGIC: &[u8; 8] = b"GILREACH";
const CACHE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ReachError {
    #[error("reference set is empty")]
    NoReferences,
    #[error("reference node {0} appears more than once")]
    DuplicateReference(usize),
    #[error("node {node} is out of range for a graph with {n} nodes")]
    NodeOutOfRange { node: usize, n: usize },
    #[error("step horizon must be at least 1")]
    ZeroSteps,
    #[error("dense oracle refuses n = {n} (limit {limit})")]
    TooLarge { n: usize, limit: usize },
    #[error("reachability cache {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("reachability cache {path} is malformed: {reason}")]
    BadCache { path: String, reason: String },
}

/// Mean shortest-path length over reached pairs, rounded and clamped to
/// `[MIN_STEPS, MAX_STEPS]`.
///
/// Graphs with at most [`FULL_BFS_LIMIT`] nodes are searched from every node;
/// larger graphs from `min(sample_size, n)` seeded random sources.
pub fn estimate_dp(g: &SparseGraph, sample_size: usize, seed: u64) -> usize {
    let n = g.num_nodes();
    if n == 0 {
        return MIN_STEPS;
    }
    let sources: Vec<usize> = if n <= FULL_BFS_LIMIT {
        (0..n).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = sample(&mut rng, n, sample_size.clamp(1, n)).into_vec();
        s.sort_unstable();
        s
    };
    let (total, pairs) = sources
        .par_iter()
        .map(|&s| {
            g.bfs_distances(&[s])
                .into_iter()
                .flatten()
                .filter(|&d| d > 0)
                .fold((0u64, 0u64), |(t, c), d| (t + d as u64, c + 1))
        })
        .reduce(|| (0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    if pairs == 0 {
        return MIN_STEPS;
    }
    let mean = total as f64 / pairs as f64;
    (mean.round() as usize).clamp(MIN_STEPS, MAX_STEPS)
}

/// Walk probabilities from `source`: column `t−1` of the `n × steps` result
/// is row `source` of `P^t`.
pub fn reach_from(p: &SparseMatrix, source: usize, steps: usize) -> Tensor {
    let n = p.rows();
    let mut out = Tensor::zeros(n, steps);
    let mut dist = vec![0.0; n];
    dist[source] = 1.0;
    for t in 0..steps {
        dist = p.left_mul_vec(&dist);
        for (j, &v) in dist.iter().enumerate() {
            out.set(j, t, v);
        }
    }
    out
}

/// Reachability vectors from a fixed reference set to every node.
#[derive(Clone, Debug, PartialEq)]
pub struct ReachabilityTable {
    reference_ids: Vec<usize>,
    position: HashMap<usize, usize>,
    num_nodes: usize,
    steps: usize,
    /// `[reference][node][step]`, contiguous.
    probs: Vec<f64>,
}

impl ReachabilityTable {
    pub fn build(g: &SparseGraph, references: &[usize], steps: usize) -> Result<Self, ReachError> {
        let n = g.num_nodes();
        let position = Self::index_references(references, n)?;
        if steps == 0 {
            return Err(ReachError::ZeroSteps);
        }
        let p = transition_matrix(g);
        let blocks: Vec<Tensor> = references
            .par_iter()
            .map(|&r| reach_from(&p, r, steps))
            .collect();
        let mut probs = Vec::with_capacity(references.len() * n * steps);
        for block in blocks {
            probs.extend(block.into_vec());
        }
        Ok(Self {
            reference_ids: references.to_vec(),
            position,
            num_nodes: n,
            steps,
            probs,
        })
    }

    fn index_references(references: &[usize], n: usize) -> Result<HashMap<usize, usize>, ReachError> {
        if references.is_empty() {
            return Err(ReachError::NoReferences);
        }
        let mut position = HashMap::with_capacity(references.len());
        for (k, &r) in references.iter().enumerate() {
            if r >= n {
                return Err(ReachError::NodeOutOfRange { node: r, n });
            }
            if position.insert(r, k).is_some() {
                return Err(ReachError::DuplicateReference(r));
            }
        }
        Ok(position)
    }

    pub fn reference_ids(&self) -> &[usize] {
        &self.reference_ids
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    /// Row of `reference` in the table, if it is one.
    pub fn reference_index(&self, reference: usize) -> Option<usize> {
        self.position.get(&reference).copied()
    }

    /// Reachability vector from the `k`-th reference to `node`.
    #[inline]
    pub fn vector(&self, k: usize, node: usize) -> &[f64] {
        let start = (k * self.num_nodes + node) * self.steps;
        &self.probs[start..start + self.steps]
    }

    /// Reachability vector from reference node id `from` to `to`.
    pub fn pair(&self, from: usize, to: usize) -> Option<&[f64]> {
        self.reference_index(from).map(|k| self.vector(k, to))
    }

    /// Stacks the vectors for every `(query, reference)` pair, query-major,
    /// into a `(|queries|·|refs|) × steps` matrix.
    pub fn pair_features(&self, queries: &[usize]) -> Tensor {
        let m = self.reference_ids.len();
        let mut data = Vec::with_capacity(queries.len() * m * self.steps);
        for &q in queries {
            for k in 0..m {
                data.extend_from_slice(self.vector(k, q));
            }
        }
        Tensor::from_vec(queries.len() * m, self.steps, data)
    }

    /// Writes the table with a header binding it to `key`.
    pub fn write_cache(&self, path: &Path, key: &CacheKey) -> Result<(), ReachError> {
        let mut buf = Vec::with_capacity(64 + self.probs.len() * 8);
        buf.extend_from_slice(CACHE_MAGIC);
        buf.extend_from_slice(&CACHE_VERSION.to_le_bytes());
        for v in [
            key.dataset_hash,
            key.reference_hash,
            self.steps as u64,
            self.reference_ids.len() as u64,
            self.num_nodes as u64,
        ] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for &r in &self.reference_ids {
            buf.extend_from_slice(&(r as u64).to_le_bytes());
        }
        for &p in &self.probs {
            buf.extend_from_slice(&p.to_le_bytes());
        }
        fs::write(path, buf).map_err(|source| ReachError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    /// Loads a cached table; `Ok(None)` when the file is absent or was written
    /// for a different key.
    pub fn read_cache(path: &Path, key: &CacheKey) -> Result<Option<Self>, ReachError> {
        let bytes = match fs::read(path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(None),
            Err(source) => {
                return Err(ReachError::Io {
                    path: path.display().to_string(),
                    source,
                })
            }
        };
        let bad = |reason: &str| ReachError::BadCache {
            path: path.display().to_string(),
            reason: reason.to_string(),
        };
        let mut cur = ByteCursor::new(&bytes);
        if cur.take(8).ok_or_else(|| bad("truncated header"))? != CACHE_MAGIC {
            return Err(bad("wrong magic"));
        }
        let version = u32::from_le_bytes(cur.array().ok_or_else(|| bad("truncated header"))?);
        if version != CACHE_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let mut header = [0u64; 5];
        for h in &mut header {
            *h = u64::from_le_bytes(cur.array().ok_or_else(|| bad("truncated header"))?);
        }
        let [dataset_hash, reference_hash, steps, num_refs, n] = header;
        if dataset_hash != key.dataset_hash || reference_hash != key.reference_hash || steps as usize != key.steps {
            return Ok(None);
        }
        let (steps, num_refs, n) = (steps as usize, num_refs as usize, n as usize);
        let mut reference_ids = Vec::with_capacity(num_refs);
        for _ in 0..num_refs {
            reference_ids.push(u64::from_le_bytes(cur.array().ok_or_else(|| bad("truncated ids"))?) as usize);
        }
        let count = num_refs * n * steps;
        let mut probs = Vec::with_capacity(count);
        for _ in 0..count {
            probs.push(f64::from_le_bytes(cur.array().ok_or_else(|| bad("truncated body"))?));
        }
        if !cur.is_empty() {
            return Err(bad("trailing bytes"));
        }
        if reference_set_hash(&reference_ids) != key.reference_hash {
            return Err(bad("reference ids disagree with header hash"));
        }
        let position = Self::index_references(&reference_ids, n).map_err(|e| bad(&e.to_string()))?;
        Ok(Some(Self {
            reference_ids,
            position,
            num_nodes: n,
            steps,
            probs,
        }))
    }
}

/// Identity of a cached table: which graph, which references, how many steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CacheKey {
    pub dataset_hash: u64,
    pub reference_hash: u64,
    pub steps: usize,
}

impl CacheKey {
    pub fn new(dataset_hash: u64, references: &[usize], steps: usize) -> Self {
        Self {
            dataset_hash,
            reference_hash: reference_set_hash(references),
            steps,
        }
    }
}

/// Order-sensitive hash of a reference list.
pub fn reference_set_hash(references: &[usize]) -> u64 {
    let mut h = Fnv1a::default();
    for &r in references {
        h.update(&(r as u64).to_le_bytes());
    }
    h.finish()
}

/// Dense `P, P², …, P^{steps}` by repeated dense multiplication.
pub fn dense_power_oracle(g: &SparseGraph, steps: usize) -> Result<Vec<Tensor>, ReachError> {
    let n = g.num_nodes();
    if n > DENSE_ORACLE_LIMIT {
        return Err(ReachError::TooLarge {
            n,
            limit: DENSE_ORACLE_LIMIT,
        });
    }
    let p = transition_matrix(g).to_dense();
    let mut powers = Vec::with_capacity(steps);
    let mut current = p.clone();
    for _ in 0..steps {
        powers.push(current.clone());
        let mut next = Tensor::zeros(n, n);
        for i in 0..n {
            for h in 0..n {
                let a = current.get(i, h);
                if a == 0.0 {
                    continue;
                }
                for j in 0..n {
                    let v = next.get(i, j) + a * p.get(h, j);
                    next.set(i, j, v);
                }
            }
        }
        current = next;
    }
    Ok(powers)
}
