use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub(crate) fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Mini-batches drawn without replacement within an epoch. Each epoch is a
/// fresh shuffle cut into consecutive batches, so every node appears once
/// per `⌈n / batch⌉` calls; the last batch of an epoch may be short.
#[derive(Clone, Debug)]
pub struct EpochSampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl EpochSampler {
    pub fn new(ids: &[usize], seed: u64) -> Self {
        assert!(!ids.is_empty(), "cannot sample from an empty set");
        Self {
            order: ids.to_vec(),
            pos: ids.len(),
            rng: rng(seed),
        }
    }

    pub fn next_batch(&mut self, batch: usize) -> Vec<usize> {
        if self.pos >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let end = (self.pos + batch).min(self.order.len());
        let out = self.order[self.pos..end].to_vec();
        self.pos = end;
        out
    }
}

/// `batch` ids drawn uniformly with replacement, or all of `ids` when there
/// are no more than `batch` of them.
pub fn sample_with_replacement(ids: &[usize], batch: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if ids.len() <= batch {
        return ids.to_vec();
    }
    (0..batch).map(|_| ids[rng.random_range(0..ids.len())]).collect()
}
