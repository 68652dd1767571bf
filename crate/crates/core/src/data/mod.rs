//! Neutral on-disk dataset format.
//!
//! A dataset is a directory holding five files:
//!
//! | file           | contents                                                            |
//! |----------------|---------------------------------------------------------------------|
//! | `manifest.txt` | `key=value` lines: name, n, d, num_classes, directed, num_edges,    |
//! |                | features_format and an FNV-1a 64 checksum of every other file       |
//! | `edges.bin`    | records of `u32 src, u32 dst, f64 weight`                           |
//! | `features.bin` | `u64 rows, u64 cols, u64 format`, then dense row-major `f64`        |
//! |                | (format 0) or CSR (format 1: `u64 nnz`, `rows+1` `u64` row          |
//! |                | pointers, `nnz` `u32` columns, `nnz` `f64` values)                  |
//! | `labels.bin`   | `n` × `i32`, `-1` for unlabeled                                     |
//! | `splits.bin`   | train, val, test, each as `u32 len` followed by `len` `u32` ids     |
//!
//! All integers and floats are little-endian. The edge list is kept verbatim
//! so a dataset round-trips byte for byte; the graph built from it is
//! symmetrized when the manifest declares it undirected.

mod format;
pub mod synthetic;

use std::collections::HashSet;
use std::io;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::graph::{GraphError, SparseGraph};
use crate::tensor::Tensor;

pub use format::{load_dataset, load_dataset_with, save_dataset, LoadOptions};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {reason}")]
    Malformed { path: PathBuf, reason: String },
    #[error("{path}: checksum {actual:016x} does not match manifest {expected:016x}")]
    Checksum {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },
    #[error("{path}: manifest declares {what} = {declared} but the file holds {actual}")]
    CountMismatch {
        path: PathBuf,
        what: &'static str,
        declared: usize,
        actual: usize,
    },
    #[error("{path}: node id {node} out of range for n = {n}")]
    DanglingNode { path: PathBuf, node: usize, n: usize },
    #[error("node {0} appears in more than one split (or twice in one)")]
    OverlappingSplits(usize),
    #[error("training node {0} has no label")]
    UnlabeledTrainNode(usize),
    #[error("label rate {rate} keeps {target} nodes, fewer than the {classes} classes")]
    RateTooSmall {
        rate: f64,
        target: usize,
        classes: usize,
    },
    #[error("label rate {rate} is not in (0, {current}]")]
    InvalidRate { rate: f64, current: f64 },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Disjoint train / validation / test node lists.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    /// Checks ids are in range, pairwise disjoint and that every training
    /// node carries a label.
    pub fn validate(&self, g: &SparseGraph) -> Result<()> {
        let n = g.num_nodes();
        let mut seen = HashSet::with_capacity(self.train.len() + self.val.len() + self.test.len());
        for &id in self.train.iter().chain(&self.val).chain(&self.test) {
            if id >= n {
                return Err(DataError::DanglingNode {
                    path: PathBuf::from("splits"),
                    node: id,
                    n,
                });
            }
            if !seen.insert(id) {
                return Err(DataError::OverlappingSplits(id));
            }
        }
        if let Some(&id) = self.train.iter().find(|&&id| g.label(id).is_none()) {
            return Err(DataError::UnlabeledTrainNode(id));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureFormat {
    Dense,
    Csr,
}

/// A graph, its split and the bookkeeping needed to write it back.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    pub name: String,
    pub graph: SparseGraph,
    pub split: Split,
    /// Edge records exactly as stored on disk.
    pub edges: Vec<(u32, u32, f64)>,
    pub feature_format: FeatureFormat,
}

impl DatasetBundle {
    /// Builds a bundle from an edge list, validating graph and split.
    pub fn new(
        name: impl Into<String>,
        edges: Vec<(u32, u32, f64)>,
        directed: bool,
        features: Tensor,
        labels: Vec<Option<usize>>,
        num_classes: usize,
        split: Split,
    ) -> Result<Self> {
        let n = features.rows();
        let list: Vec<(usize, usize, f64)> = edges
            .iter()
            .map(|&(a, b, w)| (a as usize, b as usize, w))
            .collect();
        let graph = SparseGraph::from_edges(n, &list, directed, features, labels, num_classes)?;
        split.validate(&graph)?;
        Ok(Self {
            name: name.into(),
            graph,
            split,
            edges,
            feature_format: FeatureFormat::Dense,
        })
    }

    pub fn label_rate(&self) -> f64 {
        self.split.train.len() as f64 / self.graph.num_nodes() as f64
    }

    pub fn stats(&self) -> DatasetStats {
        DatasetStats {
            name: self.name.clone(),
            nodes: self.graph.num_nodes(),
            edges: self.edges.len(),
            classes: self.graph.num_classes(),
            features: self.graph.feature_dim(),
            label_rate: self.label_rate(),
        }
    }

    /// Same bundle with L1-normalized feature rows (all-zero rows stay zero).
    pub fn row_normalized(&self) -> Self {
        let mut x = self.graph.features().clone();
        for r in 0..x.rows() {
            let row = x.row_mut(r);
            let s: f64 = row.iter().map(|v| v.abs()).sum();
            if s > 0.0 {
                row.iter_mut().for_each(|v| *v /= s);
            }
        }
        Self {
            graph: self
                .graph
                .with_features(x)
                .expect("normalization keeps the feature shape"),
            ..self.clone()
        }
    }
}

/// Headline statistics of a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetStats {
    pub name: String,
    pub nodes: usize,
    pub edges: usize,
    pub classes: usize,
    pub features: usize,
    pub label_rate: f64,
}

/// Published statistics of the citation benchmarks.
pub fn reference_stats(name: &str) -> Option<DatasetStats> {
    let (nodes, edges, classes, features, label_rate) = match name.to_ascii_lowercase().as_str() {
        "cora" => (2708, 5429, 7, 1433, 0.052),
        "citeseer" => (3327, 4732, 6, 3703, 0.036),
        "pubmed" => (19717, 44338, 3, 500, 0.003),
        _ => return None,
    };
    Some(DatasetStats {
        name: name.to_ascii_lowercase(),
        nodes,
        edges,
        classes,
        features,
        label_rate,
    })
}

/// Differences between `stats` and the published values, one message each.
/// Label rates are compared to three decimals.
pub fn compare_stats(stats: &DatasetStats, expected: &DatasetStats) -> Vec<String> {
    let mut out = Vec::new();
    let counts = [
        ("nodes", stats.nodes, expected.nodes),
        ("edges", stats.edges, expected.edges),
        ("classes", stats.classes, expected.classes),
        ("features", stats.features, expected.features),
    ];
    for (what, got, want) in counts {
        if got != want {
            out.push(format!("{what}: {got} (expected {want})"));
        }
    }
    let rate = (stats.label_rate * 1000.0).round() / 1000.0;
    if (rate - expected.label_rate).abs() > 1e-9 {
        out.push(format!(
            "label rate: {:.3} (expected {:.3})",
            stats.label_rate, expected.label_rate
        ));
    }
    out
}

/// Stratified subsample of the training nodes down to `round(rate · n)`
/// nodes, keeping at least one per class. Validation and test nodes are
/// untouched and the surviving training nodes keep their original order.
pub fn subsample_labels(bundle: &DatasetBundle, rate: f64, seed: u64) -> Result<DatasetBundle> {
    let n = bundle.graph.num_nodes();
    let current = bundle.label_rate();
    let target = (rate * n as f64).round() as usize;
    if !(rate > 0.0) || target > bundle.split.train.len() {
        return Err(DataError::InvalidRate { rate, current });
    }
    let classes = bundle.graph.num_classes();
    if target < classes {
        return Err(DataError::RateTooSmall {
            rate,
            target,
            classes,
        });
    }
    if target == bundle.split.train.len() {
        return Ok(bundle.clone());
    }

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for &id in &bundle.split.train {
        let c = bundle.graph.label(id).expect("training nodes are labeled");
        by_class[c].push(id);
    }
    if let Some(c) = by_class.iter().position(Vec::is_empty) {
        return Err(DataError::RateTooSmall {
            rate,
            target: 0,
            classes: c + 1,
        });
    }
    let quota = allocate(&by_class.iter().map(Vec::len).collect::<Vec<_>>(), target);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = HashSet::with_capacity(target);
    for (members, &q) in by_class.iter().zip(&quota) {
        let mut shuffled = members.clone();
        shuffled.shuffle(&mut rng);
        keep.extend(shuffled.into_iter().take(q));
    }
    let train = bundle
        .split
        .train
        .iter()
        .copied()
        .filter(|id| keep.contains(id))
        .collect();
    Ok(DatasetBundle {
        split: Split {
            train,
            ..bundle.split.clone()
        },
        ..bundle.clone()
    })
}

/// Largest-remainder allocation of `target` slots proportional to `sizes`,
/// with at least one slot and at most `sizes[c]` slots per class.
fn allocate(sizes: &[usize], target: usize) -> Vec<usize> {
    let total: usize = sizes.iter().sum();
    let exact: Vec<f64> = sizes
        .iter()
        .map(|&s| target as f64 * s as f64 / total as f64)
        .collect();
    let mut quota: Vec<usize> = exact
        .iter()
        .zip(sizes)
        .map(|(&e, &s)| (e.floor() as usize).clamp(1, s))
        .collect();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    // Fill by largest remainder; ties go to the lower class index.
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    while quota.iter().sum::<usize>() < target {
        let before: usize = quota.iter().sum();
        for &c in &order {
            if quota.iter().sum::<usize>() == target {
                break;
            }
            if quota[c] < sizes[c] {
                quota[c] += 1;
            }
        }
        if quota.iter().sum::<usize>() == before {
            break;
        }
    }
    // Minimum-one bumps can overshoot; trim the classes furthest above
    // their exact share.
    while quota.iter().sum::<usize>() > target {
        let c = (0..sizes.len())
            .filter(|&c| quota[c] > 1)
            .max_by(|&a, &b| {
                (quota[a] as f64 - exact[a])
                    .total_cmp(&(quota[b] as f64 - exact[b]))
                    .then(b.cmp(&a))
            })
            .expect("target is at least the class count");
        quota[c] -= 1;
    }
    quota
}

pub(crate) fn io_error(path: &Path, source: io::Error) -> DataError {
    DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}
