//! Episodic memory for experience replay: a bounded random subset of every
//! finished domain's training split.

use rand::seq::index::sample;
use rand::Rng;

use crate::domains::LabeledDataset;
use crate::gradcore::Array;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpisodicMemory {
    /// `(domain index, stored samples)` in commit order.
    pub stores: Vec<(usize, LabeledDataset)>,
}

impl EpisodicMemory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn total(&self) -> usize {
        self.stores.iter().map(|(_, s)| s.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.total() == 0
    }

    /// Stores a uniform `m`-subset (without replacement) of `train`, or all
    /// of it when it is smaller. Returns the chosen indices.
    pub fn commit(&mut self, domain: usize, train: &LabeledDataset, m: usize, rng: &mut impl Rng) -> Vec<usize> {
        let mut idx = sample(rng, train.len(), m.min(train.len())).into_vec();
        idx.sort_unstable();
        let name = format!("{}/memory", train.name());
        self.stores.push((domain, train.subset(&idx, name)));
        idx
    }

    /// `count` samples drawn uniformly with replacement from the union of
    /// all stores, as `(store, index)` pairs.
    pub fn draw(&self, count: usize, rng: &mut impl Rng) -> Vec<(usize, usize)> {
        let total = self.total();
        (0..count)
            .map(|_| {
                let mut k = rng.random_range(0..total);
                let mut s = 0;
                while k >= self.stores[s].1.len() {
                    k -= self.stores[s].1.len();
                    s += 1;
                }
                (s, k)
            })
            .collect()
    }
}

/// Appends `batch` memory samples to the main batch. An empty memory leaves
/// the batch unchanged.
pub fn er_step(
    main: (Array<f32>, Vec<usize>),
    memory: &EpisodicMemory,
    batch: usize,
    rng: &mut impl Rng,
) -> (Array<f32>, Vec<usize>) {
    if memory.is_empty() {
        return main;
    }
    let (x, mut y) = main;
    let mut shape = x.shape().to_vec();
    let mut data = x.into_data();
    for (s, k) in memory.draw(batch, rng) {
        let store = &memory.stores[s].1;
        data.extend_from_slice(store.gather(&[k]).data());
        y.push(store.labels()[k]);
    }
    shape[0] = y.len();
    (Array::new(shape, data).expect("consistent batch"), y)
}
