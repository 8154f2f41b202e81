use std::collections::{BTreeMap, BTreeSet, HashSet};

use log::info;
use serde::{Deserialize, Serialize};

use super::model::{wmrb_batch_capped, Instance, RecModel, RecModelConfig};
use super::rank::Ranker;
use super::sampling::{sample_negatives, sample_training_instance, CustomerHistory, NegativePool};
use super::Mode;
use crate::data::interactions::SplitInteractions;
use crate::error::{Error, Result};
use crate::metrics::precision_recall_at_k;
use crate::rng::{streams, RngState};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecTrainConfig {
    pub k: usize,
    /// Negatives per instance.
    pub z: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub inputs_per_customer: usize,
    pub validation_fraction: f64,
    pub learning_rate: f64,
    pub seed: u64,
    /// Upper bound on the per-instance gradient factor `1/(ε+S)`.
    pub gradient_cap: Option<f64>,
    pub hidden_units: Option<usize>,
    /// Stop after this many epochs without a validation improvement.
    pub patience: Option<usize>,
    /// Cutoff of the validation metric.
    pub eval_k: usize,
}

impl Default for RecTrainConfig {
    fn default() -> Self {
        RecTrainConfig {
            k: 200,
            z: 100,
            batch_size: 1024,
            max_epochs: 100,
            inputs_per_customer: 5,
            validation_fraction: 0.10,
            learning_rate: 1.0,
            seed: 0,
            gradient_cap: Some(1.0),
            hidden_units: None,
            patience: Some(10),
            eval_k: 10,
        }
    }
}

impl RecTrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("k", self.k),
            ("z", self.z),
            ("batch_size", self.batch_size),
            ("max_epochs", self.max_epochs),
            ("inputs_per_customer", self.inputs_per_customer),
            ("eval_k", self.eval_k),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{} must be positive", name)));
            }
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::Config("validation_fraction must lie in (0, 1)".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.gradient_cap.is_some_and(|c| !(c > 0.0 && c.is_finite())) {
            return Err(Error::Config("gradient_cap must be positive when set".into()));
        }
        if self.patience == Some(0) || self.hidden_units == Some(0) {
            return Err(Error::Config("patience and hidden_units must be positive when set".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_precision: f64,
    pub val_recall: f64,
}

#[derive(Debug, Clone)]
pub struct RecTrainResult {
    /// Parameters from the epoch with the best validation precision.
    pub model: RecModel,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub validation_customers: Vec<usize>,
    pub training_instances: usize,
}

struct Validation {
    customers: Vec<usize>,
    inputs: Vec<Vec<usize>>,
    relevant: Vec<HashSet<usize>>,
}

/// Trains on every positive-window event of the non-validation customers,
/// with fresh input and negative samples each epoch, and keeps the epoch
/// with the best validation precision. `features` should already be
/// normalised.
pub fn train_rec(split: &SplitInteractions, features: &Tensor, config: &RecTrainConfig, mode: Mode) -> Result<RecTrainResult> {
    config.validate()?;
    let n_items = split.set.registry.len();
    features.expect_rank("train_rec", 2)?;
    if features.rows() != n_items {
        return Err(Error::dim("train_rec", format!("{} feature rows for {} items", features.rows(), n_items)));
    }
    let positive_window = split.windows[1];

    let mut histories: BTreeMap<usize, CustomerHistory> = BTreeMap::new();
    let mut positives: Vec<(usize, usize)> = Vec::new();
    for e in split.training_events() {
        let h = histories.entry(e.customer).or_default();
        if positive_window.contains(e.timestamp) {
            positives.push((e.customer, h.len()));
        }
        h.items.push(e.item);
        h.timestamps.push(e.timestamp);
    }

    let root = RngState::new(config.seed);
    let validation = pick_validation(&histories, positive_window.start, config.validation_fraction, &root);
    let held_out: HashSet<usize> = validation.customers.iter().copied().collect();
    positives.retain(|&(c, pos)| !held_out.contains(&c) && histories[&c].preceding(pos) >= config.inputs_per_customer);
    if positives.is_empty() {
        return Err(Error::Empty(format!(
            "no trainable customers: none has a positive-window event preceded by {} interactions",
            config.inputs_per_customer
        )));
    }
    let seen = split.seen_in_training();
    let pool = NegativePool {
        items: (0..n_items).filter(|&i| seen[i]).collect(),
    };
    let customer_items: BTreeMap<usize, HashSet<usize>> = histories.iter().map(|(&c, h)| (c, h.item_set())).collect();

    let mut model = RecModel::new(
        RecModelConfig {
            k: config.k,
            hidden_units: config.hidden_units,
            n_items,
            feature_dim: features.cols(),
        },
        &mut root.split(streams::INIT),
    )?;
    info!(
        "{} mode: {} training instances, {} validation customers, negative pool {}",
        mode,
        positives.len(),
        validation.customers.len(),
        pool.items.len()
    );

    let mut order_rng = root.split(streams::TRAIN);
    let batch_root = root.split(streams::NEGATIVES);
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, RecModel)> = None;
    for epoch in 1..=config.max_epochs {
        order_rng.shuffle(&mut positives);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for (b, chunk) in positives.chunks(config.batch_size).enumerate() {
            let mut rng = batch_root.split(((epoch as u64) << 32) | b as u64);
            let mut batch = Vec::with_capacity(chunk.len());
            for &(c, pos) in chunk {
                let h = &histories[&c];
                let (inputs, positive) = sample_training_instance(h, pos, config.inputs_per_customer, &mut rng)
                    .expect("instances were filtered for enough preceding events");
                let negatives = sample_negatives(&pool, &customer_items[&c], config.z, &mut rng)?;
                batch.push(Instance {
                    inputs,
                    positive,
                    negatives,
                });
            }
            let loss = wmrb_batch_capped(&mut model, &batch, features, mode, config.gradient_cap)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("WMRB loss at epoch {} batch {}", epoch, b)));
            }
            model.store.sgd_step(config.learning_rate)?;
            loss_sum += loss;
            batches += 1;
        }
        let (val_precision, val_recall) = validate(&model, features, mode, &validation, config.eval_k)?;
        let mean_loss = loss_sum / batches as f64;
        info!(
            "epoch {}: loss {:.4}, validation prec@{} {:.4}",
            epoch, mean_loss, config.eval_k, val_precision
        );
        history.push(EpochRecord {
            epoch,
            mean_loss,
            val_precision,
            val_recall,
        });
        let improved = best.as_ref().is_none_or(|(p, _, _)| val_precision > *p);
        if improved {
            best = Some((val_precision, epoch, model.clone()));
        }
        let best_epoch = best.as_ref().map(|b| b.1).unwrap_or(epoch);
        if config.patience.is_some_and(|p| epoch - best_epoch >= p) {
            break;
        }
    }
    let (_, best_epoch, model) = best.expect("at least one epoch ran");
    Ok(RecTrainResult {
        model,
        history,
        best_epoch,
        validation_customers: validation.customers,
        training_instances: positives.len(),
    })
}

/// Holds out a fraction of the customers that have both history before the
/// positive window and at least one positive-window event. Their history
/// is the input, their positive-window items are the relevant set.
fn pick_validation(
    histories: &BTreeMap<usize, CustomerHistory>,
    positive_start: i64,
    fraction: f64,
    root: &RngState,
) -> Validation {
    let mut eligible: Vec<usize> = histories
        .iter()
        .filter(|(_, h)| h.timestamps.first().is_some_and(|&t| t < positive_start) && h.timestamps.last().is_some_and(|&t| t >= positive_start))
        .map(|(&c, _)| c)
        .collect();
    root.split(streams::VALIDATION).shuffle(&mut eligible);
    let n = ((fraction * eligible.len() as f64).round() as usize).max(1).min(eligible.len());
    let mut customers: Vec<usize> = eligible[..n].to_vec();
    customers.sort_unstable();
    let mut inputs = Vec::with_capacity(n);
    let mut relevant = Vec::with_capacity(n);
    for c in &customers {
        let h = &histories[c];
        let cut = h.timestamps.partition_point(|&t| t < positive_start);
        inputs.push(h.items[..cut].to_vec());
        relevant.push(h.items[cut..].iter().copied().collect::<BTreeSet<_>>().into_iter().collect());
    }
    Validation {
        customers,
        inputs,
        relevant,
    }
}

fn validate(model: &RecModel, features: &Tensor, mode: Mode, v: &Validation, k: usize) -> Result<(f64, f64)> {
    if v.customers.is_empty() {
        return Ok((0.0, 0.0));
    }
    let ranker = Ranker::from_model(model, features, mode)?;
    let mut p = 0.0;
    let mut r = 0.0;
    for (inputs, relevant) in v.inputs.iter().zip(&v.relevant) {
        let seen: HashSet<usize> = inputs.iter().copied().collect();
        let ranked: Vec<usize> = ranker.rank(inputs, k, |i| !seen.contains(&i))?.iter().map(|s| s.item).collect();
        if let Some(m) = precision_recall_at_k(&ranked, relevant, k)? {
            p += m.precision_at_k;
            r += m.recall_at_k;
        }
    }
    let n = v.customers.len() as f64;
    Ok((p / n, r / n))
}
