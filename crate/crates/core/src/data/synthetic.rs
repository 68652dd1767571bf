//! Seeded planted-partition graphs with bag-of-words style features, used as
//! toy datasets.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DatasetBundle, Result, Split};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct PlantedPartition {
    pub name: String,
    pub nodes: usize,
    pub classes: usize,
    pub feature_dim: usize,
    /// Edge probability inside a class.
    pub p_in: f64,
    /// Edge probability across classes.
    pub p_out: f64,
    /// Probability that a class-specific word is switched on.
    pub signal: f64,
    /// Probability that any other word is switched on.
    pub noise: f64,
    pub train_per_class: usize,
    pub val: usize,
    pub seed: u64,
}

impl PlantedPartition {
    pub fn new(nodes: usize, classes: usize, seed: u64) -> Self {
        Self {
            name: "toy".into(),
            nodes,
            classes,
            feature_dim: 4 * classes,
            p_in: 0.5,
            p_out: 0.05,
            signal: 0.6,
            noise: 0.1,
            train_per_class: 1,
            val: 0,
            seed,
        }
    }

    /// Nodes are assigned to classes round-robin. The split takes the first
    /// `train_per_class` nodes of every class for training, the next `val`
    /// nodes for validation, and the rest for testing. Every node is
    /// guaranteed at least one edge and one active word.
    pub fn generate(&self) -> Result<DatasetBundle> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let n = self.nodes;
        let labels: Vec<usize> = (0..n).map(|i| i % self.classes).collect();

        let mut edges = Vec::new();
        let mut degree = vec![0usize; n];
        for i in 0..n {
            for j in i + 1..n {
                let p = if labels[i] == labels[j] { self.p_in } else { self.p_out };
                if rng.random_bool(p) {
                    edges.push((i as u32, j as u32, 1.0));
                    degree[i] += 1;
                    degree[j] += 1;
                }
            }
        }
        for i in 0..n {
            if degree[i] == 0 && n > 1 {
                // Attach to the nearest same-class node (or any other node).
                let j = (1..n)
                    .map(|k| (i + k * self.classes) % n)
                    .find(|&j| j != i)
                    .unwrap_or((i + 1) % n);
                let (a, b) = (i.min(j) as u32, i.max(j) as u32);
                edges.push((a, b, 1.0));
                degree[i] += 1;
                degree[j] += 1;
            }
        }

        let d = self.feature_dim;
        let block = (d / self.classes).max(1);
        let mut x = Tensor::zeros(n, d);
        for i in 0..n {
            let own = labels[i] * block..((labels[i] + 1) * block).min(d);
            for w in 0..d {
                let p = if own.contains(&w) { self.signal } else { self.noise };
                if rng.random_bool(p) {
                    x.set(i, w, 1.0);
                }
            }
            if x.row(i).iter().all(|&v| v == 0.0) {
                x.set(i, own.start.min(d - 1), 1.0);
            }
        }

        let mut train = Vec::new();
        let mut rest = Vec::new();
        let mut taken = vec![0usize; self.classes];
        for i in 0..n {
            if taken[labels[i]] < self.train_per_class {
                taken[labels[i]] += 1;
                train.push(i);
            } else {
                rest.push(i);
            }
        }
        rest.shuffle(&mut rng);
        let val_len = self.val.min(rest.len());
        let mut val: Vec<usize> = rest[..val_len].to_vec();
        let mut test: Vec<usize> = rest[val_len..].to_vec();
        val.sort_unstable();
        test.sort_unstable();

        DatasetBundle::new(
            self.name.clone(),
            edges,
            false,
            x,
            labels.into_iter().map(Some).collect(),
            self.classes,
            Split { train, val, test },
        )
    }
}

/// The 12-node, 3-class dataset shipped with the repository.
pub fn toy12() -> DatasetBundle {
    PlantedPartition {
        name: "toy12".into(),
        train_per_class: 2,
        val: 3,
        ..PlantedPartition::new(12, 3, 7)
    }
    .generate()
    .expect("fixed parameters produce a valid dataset")
}

/// An 8-node, 3-class dataset small enough for exhaustive gradient checks.
/// Two classes have two training nodes each, so reference weighting is not
/// trivially one.
pub fn toy8() -> DatasetBundle {
    PlantedPartition {
        name: "toy8".into(),
        feature_dim: 6,
        train_per_class: 2,
        val: 1,
        ..PlantedPartition::new(8, 3, 3)
    }
    .generate()
    .expect("fixed parameters produce a valid dataset")
}
