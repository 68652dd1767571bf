use crate::graph::SparseGraph;

/// Correct and total counts for one class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ClassTally {
    pub correct: usize,
    pub total: usize,
}

impl ClassTally {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            f64::NAN
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

/// Predictions on a set of labeled queries.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub queries: Vec<usize>,
    pub predictions: Vec<usize>,
    pub labels: Vec<usize>,
    /// Mean cross-entropy.
    pub loss: f64,
    pub accuracy: f64,
    pub per_class: Vec<ClassTally>,
}

impl Evaluation {
    pub(crate) fn new(
        queries: Vec<usize>,
        predictions: Vec<usize>,
        labels: Vec<usize>,
        loss: f64,
        num_classes: usize,
    ) -> Self {
        let mut per_class = vec![ClassTally::default(); num_classes];
        let mut correct = 0;
        for (&p, &y) in predictions.iter().zip(&labels) {
            per_class[y].total += 1;
            if p == y {
                per_class[y].correct += 1;
                correct += 1;
            }
        }
        let accuracy = if labels.is_empty() {
            f64::NAN
        } else {
            correct as f64 / labels.len() as f64
        };
        Self {
            queries,
            predictions,
            labels,
            loss,
            accuracy,
            per_class,
        }
    }

    pub fn correct(&self) -> Vec<bool> {
        self.predictions
            .iter()
            .zip(&self.labels)
            .map(|(p, y)| p == y)
            .collect()
    }
}

/// Accuracy of queries grouped by hop distance to the nearest labeled node.
/// `steps == None` collects the queries no labeled node reaches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StepBucket {
    pub steps: Option<usize>,
    pub count: usize,
    pub correct: usize,
    /// Counts over every bucket up to and including this one.
    pub cumulative_count: usize,
    pub cumulative_correct: usize,
}

impl StepBucket {
    pub fn cumulative_accuracy(&self) -> f64 {
        if self.cumulative_count == 0 {
            f64::NAN
        } else {
            self.cumulative_correct as f64 / self.cumulative_count as f64
        }
    }
}

/// Buckets `queries` by shortest-path distance from `sources` and tallies
/// `correct` in each, with running totals in increasing distance. Every
/// distance from 1 to the largest observed one gets a bucket (plus a
/// distance-0 bucket if a query is itself a source); unreachable queries
/// come last.
pub fn step_buckets(
    g: &SparseGraph,
    sources: &[usize],
    queries: &[usize],
    correct: &[bool],
) -> Vec<StepBucket> {
    assert_eq!(queries.len(), correct.len());
    let dist = g.bfs_distances(sources);
    let max = queries.iter().filter_map(|&q| dist[q]).max();
    let mut tallies: Vec<(usize, usize)> = vec![(0, 0); max.map_or(0, |m| m + 1)];
    let mut unreachable = (0, 0);
    for (&q, &ok) in queries.iter().zip(correct) {
        let slot = match dist[q] {
            Some(d) => &mut tallies[d],
            None => &mut unreachable,
        };
        slot.0 += 1;
        slot.1 += ok as usize;
    }
    let skip = usize::from(tallies.first().is_some_and(|t| t.0 == 0));
    let mut out = Vec::with_capacity(tallies.len() + 1);
    let (mut cc, mut ck) = (0, 0);
    let rows = tallies
        .into_iter()
        .enumerate()
        .skip(skip)
        .map(|(d, t)| (Some(d), t))
        .chain((unreachable.0 > 0).then_some((None, unreachable)));
    for (steps, (count, correct)) in rows {
        cc += count;
        ck += correct;
        out.push(StepBucket {
            steps,
            count,
            correct,
            cumulative_count: cc,
            cumulative_correct: ck,
        });
    }
    out
}
