use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Epoch-wise batch plan that spreads every class over all batches, so each
/// batch holds several clips per class whenever the class is large enough.
#[derive(Clone, Debug)]
pub struct LabelAwareSampler {
    labels: Vec<usize>,
    batch_size: usize,
    seed: u64,
}

impl LabelAwareSampler {
    pub fn new(labels: Vec<usize>, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size < 2 {
            return Err(Error::config("batch size must be at least 2"));
        }
        if labels.len() < 2 {
            return Err(Error::config("training needs at least 2 clips"));
        }
        Ok(Self {
            labels,
            batch_size,
            seed,
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.labels.len().div_ceil(self.batch_size)
    }

    /// Indices of every batch of `epoch`, fully determined by the seed.
    pub fn epoch(&self, epoch: u64) -> Vec<Vec<usize>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &l) in self.labels.iter().enumerate() {
            by_class.entry(l).or_default().push(i);
        }
        let mut classes: Vec<Vec<usize>> = by_class.into_values().collect();
        for c in &mut classes {
            c.shuffle(&mut rng);
        }
        classes.shuffle(&mut rng);
        let n = self.batches_per_epoch();
        let mut batches = vec![Vec::with_capacity(self.batch_size); n];
        for (k, idx) in classes.into_iter().flatten().enumerate() {
            batches[k % n].push(idx);
        }
        for b in &mut batches {
            b.shuffle(&mut rng);
        }
        batches
    }

    /// Batch used at global `step`.
    pub fn batch_at(&self, step: u64) -> Vec<usize> {
        let per = self.batches_per_epoch() as u64;
        let mut plan = self.epoch(step / per);
        plan.swap_remove((step % per) as usize)
    }
}
