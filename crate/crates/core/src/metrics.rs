//! Classification and ranking metrics.

use std::collections::HashSet;
use std::hash::Hash;
use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};

fn check_pair(truth: &[usize], pred: &[usize]) -> Result<()> {
    if truth.len() != pred.len() {
        return Err(Error::dim(
            "metrics",
            format!("{} true labels vs {} predictions", truth.len(), pred.len()),
        ));
    }
    if truth.is_empty() {
        return Err(Error::Empty("no samples to score".into()));
    }
    Ok(())
}

/// Per-class F1 averaged with weights `support_c / N`. A class with
/// `precision + recall = 0` contributes an F1 of zero.
pub fn weighted_f1(truth: &[usize], pred: &[usize], num_classes: usize) -> Result<f64> {
    check_pair(truth, pred)?;
    let mut tp = vec![0usize; num_classes];
    let mut true_count = vec![0usize; num_classes];
    let mut pred_count = vec![0usize; num_classes];
    for (&t, &p) in truth.iter().zip(pred) {
        if t >= num_classes || p >= num_classes {
            return Err(Error::Index {
                what: "label vocabulary",
                index: t.max(p),
                size: num_classes,
            });
        }
        true_count[t] += 1;
        pred_count[p] += 1;
        if t == p {
            tp[t] += 1;
        }
    }
    let n = truth.len() as f64;
    let mut total = 0.0;
    for c in 0..num_classes {
        if true_count[c] == 0 {
            continue;
        }
        // F1 = 2·tp / (true + predicted), which is zero exactly when tp is.
        let f1 = 2.0 * tp[c] as f64 / (true_count[c] + pred_count[c]) as f64;
        total += true_count[c] as f64 / n * f1;
    }
    Ok(total)
}

pub fn accuracy(truth: &[usize], pred: &[usize]) -> Result<f64> {
    check_pair(truth, pred)?;
    let hits = truth.iter().zip(pred).filter(|(t, p)| t == p).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Frequency of the most common true label.
pub fn majority_baseline(truth: &[usize], num_classes: usize) -> Result<f64> {
    if truth.is_empty() {
        return Err(Error::Empty("no samples to score".into()));
    }
    let mut counts = vec![0usize; num_classes];
    for &t in truth {
        counts[t] += 1;
    }
    Ok(*counts.iter().max().unwrap() as f64 / truth.len() as f64)
}

/// Counts with true labels by row and predicted labels by column.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConfusionMatrix {
    pub labels: Vec<String>,
    pub counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    /// Each row divided by its sum; empty rows stay zero.
    pub fn normalised(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|row| {
                let s: usize = row.iter().sum();
                row.iter()
                    .map(|&c| if s == 0 { 0.0 } else { c as f64 / s as f64 })
                    .collect()
            })
            .collect()
    }

    /// Writes a CSV with a header of predicted labels and one row per true
    /// label.
    pub fn write_csv<W: Write>(&self, out: W, normalise: bool) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["true\\predicted".to_string()];
        header.extend(self.labels.iter().cloned());
        w.write_record(&header)?;
        let norm = self.normalised();
        for (i, label) in self.labels.iter().enumerate() {
            let mut rec = vec![label.clone()];
            if normalise {
                rec.extend(norm[i].iter().map(|v| format!("{:.6}", v)));
            } else {
                rec.extend(self.counts[i].iter().map(|v| v.to_string()));
            }
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io("confusion csv", e))?;
        Ok(())
    }
}

pub fn confusion(truth: &[usize], pred: &[usize], labels: &[String]) -> Result<ConfusionMatrix> {
    if truth.len() != pred.len() {
        return Err(Error::dim("confusion", "label lists differ in length"));
    }
    let c = labels.len();
    let mut counts = vec![vec![0usize; c]; c];
    for (&t, &p) in truth.iter().zip(pred) {
        if t >= c || p >= c {
            return Err(Error::Unknown {
                what: "label",
                name: t.max(p).to_string(),
            });
        }
        counts[t][p] += 1;
    }
    Ok(ConfusionMatrix {
        labels: labels.to_vec(),
        counts,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RankingMetrics {
    pub precision_at_k: f64,
    pub recall_at_k: f64,
    pub k: usize,
    pub hits: usize,
}

/// Precision and recall of the first `k` entries of `ranked`. Returns
/// `Ok(None)` when there is nothing relevant, in which case recall is
/// undefined and the caller should skip the customer.
pub fn precision_recall_at_k<T: Eq + Hash>(
    ranked: &[T],
    relevant: &HashSet<T>,
    k: usize,
) -> Result<Option<RankingMetrics>> {
    if k == 0 {
        return Err(Error::Config("cutoff k must be at least 1".into()));
    }
    let mut seen = HashSet::with_capacity(ranked.len());
    if !ranked.iter().all(|x| seen.insert(x)) {
        return Err(Error::Duplicate("ranking contains a repeated item".into()));
    }
    if relevant.is_empty() {
        return Ok(None);
    }
    let hits = ranked.iter().take(k).filter(|x| relevant.contains(*x)).count();
    Ok(Some(RankingMetrics {
        precision_at_k: hits as f64 / k as f64,
        recall_at_k: hits as f64 / relevant.len() as f64,
        k,
        hits,
    }))
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}
