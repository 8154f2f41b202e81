use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashSet};

use rayon::prelude::*;
use serde::Serialize;

use super::model::{item_vectors, RecModel};
use super::Mode;
use crate::data::interactions::{Event, InteractionKind, SplitInteractions};
use crate::error::{Error, Result};
use crate::metrics::{mean_std, precision_recall_at_k};
use crate::tensor::{dot, l2_norm, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScoredItem {
    pub item: usize,
    pub score: f64,
}

fn by_score_then_index(a: &ScoredItem, b: &ScoredItem) -> Ordering {
    b.score.total_cmp(&a.score).then(a.item.cmp(&b.item))
}

/// Top `n` of the admitted items by descending score, ties by ascending index.
pub fn rank_items(scores: &[f64], n: usize, admit: impl Fn(usize) -> bool) -> Vec<ScoredItem> {
    let mut all: Vec<ScoredItem> = scores
        .iter()
        .enumerate()
        .filter(|(i, _)| admit(*i))
        .map(|(item, &score)| ScoredItem { item, score })
        .collect();
    if all.len() > n && n > 0 {
        all.select_nth_unstable_by(n - 1, by_score_then_index);
        all.truncate(n);
    }
    all.sort_by(by_score_then_index);
    all
}

pub fn popularity_counts<'a>(events: impl IntoIterator<Item = &'a Event>, n_items: usize) -> Vec<usize> {
    let mut counts = vec![0; n_items];
    for e in events {
        counts[e.item] += 1;
    }
    counts
}

/// Every item by descending interaction count, ties by ascending index.
pub fn popularity_ranking(counts: &[usize]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    order
}

/// Something that turns a customer's history into a ranking.
#[derive(Debug, Clone)]
pub enum Ranker {
    /// The same count-ordered list for everyone.
    Popularity { counts: Vec<usize> },
    /// Precomputed item vectors of a trained model.
    Vectors { vectors: Tensor },
}

impl Ranker {
    pub fn from_model(model: &RecModel, features: &Tensor, mode: Mode) -> Result<Self> {
        let items: Vec<usize> = (0..model.config.n_items).collect();
        Ok(Ranker::Vectors {
            vectors: item_vectors(model, features, &items, mode)?,
        })
    }

    pub fn popularity(counts: Vec<usize>) -> Self {
        Ranker::Popularity { counts }
    }

    pub fn num_items(&self) -> usize {
        match self {
            Ranker::Popularity { counts } => counts.len(),
            Ranker::Vectors { vectors } => vectors.rows(),
        }
    }

    /// Scores of every item for a customer; an empty history is a cold-user
    /// error for vector rankers.
    pub fn scores(&self, history: &[usize]) -> Result<Vec<f64>> {
        match self {
            Ranker::Popularity { counts } => Ok(counts.iter().map(|&c| c as f64).collect()),
            Ranker::Vectors { vectors } => {
                if history.is_empty() {
                    return Err(Error::Empty("cold user: no interacted items".into()));
                }
                let mut u = vec![0.0; vectors.cols()];
                for &i in history {
                    if i >= vectors.rows() {
                        return Err(Error::Index {
                            what: "item",
                            index: i,
                            size: vectors.rows(),
                        });
                    }
                    for (a, v) in u.iter_mut().zip(vectors.row(i)) {
                        *a += v;
                    }
                }
                let n = history.len() as f64;
                u.iter_mut().for_each(|a| *a /= n);
                Ok((0..vectors.rows()).map(|i| dot(&u, vectors.row(i))).collect())
            }
        }
    }

    pub fn rank(&self, history: &[usize], n: usize, admit: impl Fn(usize) -> bool) -> Result<Vec<ScoredItem>> {
        if n == 0 {
            return Err(Error::Config("N must be positive".into()));
        }
        Ok(rank_items(&self.scores(history)?, n, admit))
    }
}

/// Top-`n` items for a customer with a non-empty history. Excluded items are
/// removed before the cutoff.
pub fn recommend(
    model: &RecModel,
    features: &Tensor,
    mode: Mode,
    history: &[usize],
    n: usize,
    exclusions: &HashSet<usize>,
) -> Result<Vec<ScoredItem>> {
    Ranker::from_model(model, features, mode)?.rank(history, n, |i| !exclusions.contains(&i))
}

/// Top-`n` items by cosine similarity to `seed`, excluding the seed itself.
/// Zero vectors have similarity 0 with everything.
pub fn similar_items(model: &RecModel, features: &Tensor, seed: usize, mode: Mode, n: usize) -> Result<Vec<ScoredItem>> {
    if n == 0 {
        return Err(Error::Config("N must be positive".into()));
    }
    let items: Vec<usize> = (0..model.config.n_items).collect();
    if seed >= items.len() {
        return Err(Error::Index {
            what: "item",
            index: seed,
            size: items.len(),
        });
    }
    let v = item_vectors(model, features, &items, mode)?;
    let s = v.row(seed);
    let s_norm = l2_norm(s);
    if s_norm == 0.0 {
        return Err(Error::DegenerateVector(seed));
    }
    let cos: Vec<f64> = (0..v.rows())
        .map(|i| {
            let n = l2_norm(v.row(i));
            if n == 0.0 {
                0.0
            } else {
                dot(s, v.row(i)) / (s_norm * n)
            }
        })
        .collect();
    Ok(rank_items(&cos, n, |i| i != seed))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankingReport {
    pub precision: f64,
    pub recall: f64,
    pub precision_std: f64,
    pub recall_std: f64,
    /// Customers with a non-empty relevant set.
    pub customers: usize,
    /// Of those, customers served by the fallback ranker.
    pub cold_customers: usize,
}

/// Precision and recall at `k` over test-window purchasers. The customer's
/// vector uses all of their training-window items; customers without any
/// fall back to `fallback`. With `subset`, both candidates and relevant
/// items are restricted to it.
pub fn evaluate_ranking(
    ranker: &Ranker,
    fallback: &Ranker,
    split: &SplitInteractions,
    k: usize,
    exclude_seen: bool,
    subset: Option<&[bool]>,
) -> Result<RankingReport> {
    let n_items = split.set.registry.len();
    if ranker.num_items() != n_items || fallback.num_items() != n_items {
        return Err(Error::dim("evaluate_ranking", "ranker and registry sizes differ"));
    }
    let in_subset = |i: usize| subset.is_none_or(|s| s[i]);
    let mut history: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for e in split.training_events() {
        history.entry(e.customer).or_default().push(e.item);
    }
    let mut relevant: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    for e in &split.test {
        if e.kind == InteractionKind::Purchase && in_subset(e.item) {
            relevant.entry(e.customer).or_default().insert(e.item);
        }
    }
    let empty = Vec::new();
    let rows: Vec<(f64, f64, bool)> = relevant
        .par_iter()
        .map(|(c, rel)| {
            let h = history.get(c).unwrap_or(&empty);
            let seen: HashSet<usize> = if exclude_seen { h.iter().copied().collect() } else { HashSet::new() };
            let admit = |i: usize| in_subset(i) && !seen.contains(&i);
            let (ranked, cold) = match ranker.rank(h, k, admit) {
                Ok(r) => (r, false),
                Err(Error::Empty(_)) => (fallback.rank(h, k, admit)?, true),
                Err(e) => return Err(e),
            };
            let ids: Vec<usize> = ranked.iter().map(|s| s.item).collect();
            let rel: HashSet<usize> = rel.iter().copied().collect();
            let m = precision_recall_at_k(&ids, &rel, k)?.expect("relevant set is non-empty");
            Ok((m.precision_at_k, m.recall_at_k, cold))
        })
        .collect::<Result<Vec<_>>>()?;
    if rows.is_empty() {
        return Err(Error::Empty("no test-window purchasers to evaluate".into()));
    }
    let (p, p_std) = mean_std(&rows.iter().map(|r| r.0).collect::<Vec<_>>());
    let (r, r_std) = mean_std(&rows.iter().map(|r| r.1).collect::<Vec<_>>());
    Ok(RankingReport {
        precision: p,
        recall: r,
        precision_std: p_std,
        recall_std: r_std,
        customers: rows.len(),
        cold_customers: rows.iter().filter(|r| r.2).count(),
    })
}
