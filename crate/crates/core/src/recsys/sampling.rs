use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::rng::RngState;

/// One customer's training-window events in time order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CustomerHistory {
    pub items: Vec<usize>,
    pub timestamps: Vec<i64>,
}

impl CustomerHistory {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn item_set(&self) -> HashSet<usize> {
        self.items.iter().copied().collect()
    }

    /// Number of events strictly before event `pos`.
    pub fn preceding(&self, pos: usize) -> usize {
        self.timestamps.partition_point(|&t| t < self.timestamps[pos])
    }
}

/// Picks `n_inputs` distinct events strictly preceding event `positive`
/// (returned in time order) and the positive item, or `None` when fewer
/// than `n_inputs` such events exist.
pub fn sample_training_instance(
    history: &CustomerHistory,
    positive: usize,
    n_inputs: usize,
    rng: &mut RngState,
) -> Option<(Vec<usize>, usize)> {
    let before = history.preceding(positive);
    if before < n_inputs || n_inputs == 0 {
        return None;
    }
    let mut picks = rng.sample_distinct(before, n_inputs);
    picks.sort_unstable();
    Some((picks.iter().map(|&p| history.items[p]).collect(), history.items[positive]))
}

/// Items eligible as negatives: those available throughout training.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NegativePool {
    pub items: Vec<usize>,
}

/// `z` distinct items drawn uniformly from the pool minus `exclude`.
pub fn sample_negatives(pool: &NegativePool, exclude: &HashSet<usize>, z: usize, rng: &mut RngState) -> Result<Vec<usize>> {
    let candidates: Vec<usize> = pool.items.iter().copied().filter(|i| !exclude.contains(i)).collect();
    if candidates.len() < z {
        return Err(Error::Sampling(format!(
            "only {} negative candidates for z = {}; lower z",
            candidates.len(),
            z
        )));
    }
    Ok(rng.sample_distinct(candidates.len(), z).into_iter().map(|p| candidates[p]).collect())
}
