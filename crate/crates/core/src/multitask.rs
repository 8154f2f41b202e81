//! Per-attribute datasets and the round-robin multi-task training loop.
//!
//! Every cycle visits the tasks in a fresh random order and gives each one
//! exactly one SGD step on a minibatch drawn with replacement from that
//! task's training samples.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::attr::{
    argmax, build_attr_model, head_probabilities, inverse_frequency_weights, shared_representations,
    task_loss_and_grad, AttrModel, AttrModelConfig, InputGroup, ProductRecord, TaskSpec, VocabSizes, SHARED_PREFIX,
};
use crate::data::catalogue::TaxonomyEntry;
use crate::data::vocab::CategoryVocab;
use crate::error::{Error, Result};
use crate::metrics::{self, ConfusionMatrix};
use crate::params::ParameterStore;
use crate::rng::{streams, RngState};

/// Minimum class support used by the original protocol.
pub const DEFAULT_MIN_SUPPORT: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    /// Index into the record list the datasets were built from.
    pub record: usize,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDataset {
    pub task: TaskSpec,
    pub samples: Vec<Sample>,
    /// Indices into `samples`.
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl TaskDataset {
    pub fn split(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// A taxonomy attribute that did not survive filtering.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DroppedTask {
    pub name: String,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct TaskDatasets {
    pub datasets: Vec<TaskDataset>,
    pub dropped: Vec<DroppedTask>,
    /// Per record: true when the product belongs to the training split.
    pub is_train: Vec<bool>,
}

impl TaskDatasets {
    pub fn tasks(&self) -> Vec<TaskSpec> {
        self.datasets.iter().map(|d| d.task.clone()).collect()
    }
}

/// Builds one dataset per taxonomy attribute. Products are split once,
/// `round(split_fraction · n)` of them to train, so a product is on the same
/// side for every task. Label values seen fewer than `min_support` times
/// (per-attribute overrides from the taxonomy win) are dropped together with
/// their samples; a task left with fewer than two values is dropped.
pub fn build_task_datasets(
    records: &[ProductRecord],
    product_types: &CategoryVocab,
    taxonomy: &[TaxonomyEntry],
    min_support: usize,
    split_fraction: f64,
    seed: u64,
) -> Result<TaskDatasets> {
    if taxonomy.is_empty() {
        return Err(Error::Empty("taxonomy has no attributes".into()));
    }
    if !(split_fraction > 0.0 && split_fraction < 1.0) {
        return Err(Error::Config("split_fraction must lie in (0, 1)".into()));
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    RngState::new(seed).split(streams::SPLIT).shuffle(&mut order);
    let n_train = (split_fraction * records.len() as f64).round() as usize;
    let mut is_train = vec![false; records.len()];
    for &i in &order[..n_train] {
        is_train[i] = true;
    }

    let mut datasets = Vec::new();
    let mut dropped = Vec::new();
    let mut names = BTreeSet::new();
    for entry in taxonomy {
        if !names.insert(entry.name.as_str()) {
            return Err(Error::Duplicate(format!("taxonomy attribute {}", entry.name)));
        }
        let threshold = entry.min_support.unwrap_or(min_support);
        let mut type_ids = BTreeSet::new();
        for t in &entry.applicable_product_types {
            match product_types.lookup(t) {
                Some(id) => {
                    type_ids.insert(id);
                }
                None => warn!("attribute {}: product type {} not in catalogue", entry.name, t),
            }
        }
        let labelled: Vec<(usize, &str)> = records
            .iter()
            .enumerate()
            .filter(|(_, r)| type_ids.contains(&r.product_type_id))
            .filter_map(|(i, r)| match r.attribute_labels.get(&entry.name) {
                Some(Some(label)) => Some((i, label.as_str())),
                _ => None,
            })
            .collect();
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for (_, l) in &labelled {
            *counts.entry(l).or_default() += 1;
        }
        let label_vocab: Vec<String> = counts
            .iter()
            .filter(|(_, &c)| c >= threshold)
            .map(|(l, _)| l.to_string())
            .collect();
        if label_vocab.len() < 2 {
            let reason = format!(
                "{} label value(s) reach min_support {}",
                label_vocab.len(),
                threshold
            );
            warn!("dropping attribute {}: {}", entry.name, reason);
            dropped.push(DroppedTask {
                name: entry.name.clone(),
                reason,
            });
            continue;
        }
        let ids: BTreeMap<&str, usize> = label_vocab.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
        let samples: Vec<Sample> = labelled
            .iter()
            .filter_map(|(i, l)| ids.get(l).map(|&label| Sample { record: *i, label }))
            .collect();
        let (train, test): (Vec<usize>, Vec<usize>) = (0..samples.len()).partition(|&s| is_train[samples[s].record]);
        let mut train_counts = vec![0usize; label_vocab.len()];
        for &s in &train {
            train_counts[samples[s].label] += 1;
        }
        let task = TaskSpec {
            name: entry.name.clone(),
            label_vocab,
            applicable_product_types: entry.applicable_product_types.clone(),
            applicable_type_ids: type_ids,
            class_weights: inverse_frequency_weights(&train_counts),
        };
        info!(
            "attribute {}: {} classes, {} train / {} test samples",
            task.name,
            task.num_classes(),
            train.len(),
            test.len()
        );
        datasets.push(TaskDataset {
            task,
            samples,
            train,
            test,
        });
    }
    Ok(TaskDatasets {
        datasets,
        dropped,
        is_train,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainPlan {
    pub cycles: usize,
    /// Cycles between metric snapshots (each cycle is one step per task).
    pub eval_every: usize,
    pub seed: u64,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for TrainPlan {
    fn default() -> Self {
        TrainPlan {
            cycles: 2000,
            eval_every: 500,
            seed: 0,
            learning_rate: 0.01,
            batch_size: 64,
        }
    }
}

impl TrainPlan {
    pub fn validate(&self) -> Result<()> {
        if self.cycles == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config("cycles, eval_every and batch_size must be positive".into()));
        }
        if self.eval_every > self.cycles {
            return Err(Error::Config("eval_every must not exceed cycles".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TrainOptions {
    /// Discard shared-layer gradients before every step so that only task
    /// heads move. Used to test head isolation.
    pub freeze_shared: bool,
    /// Skip metric snapshots entirely.
    pub no_history: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistoryRow {
    pub cycle: usize,
    pub task: String,
    pub split: Split,
    pub weighted_f1: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub history: Vec<HistoryRow>,
    /// SGD steps taken per task, in model task order.
    pub steps: Vec<usize>,
    /// Mean minibatch loss per task over the last snapshot interval.
    pub final_losses: Vec<f64>,
}

/// Runs `plan.cycles` round-robin cycles. `datasets[i]` must describe
/// `model.tasks[i]`.
pub fn train(
    model: &AttrModel,
    store: &mut ParameterStore,
    datasets: &[TaskDataset],
    records: &[ProductRecord],
    plan: &TrainPlan,
    options: TrainOptions,
) -> Result<TrainReport> {
    plan.validate()?;
    check_alignment(model, datasets)?;
    for d in datasets {
        if d.train.is_empty() {
            return Err(Error::Empty(format!("attribute {} has no training samples", d.task.name)));
        }
    }
    let mut rng = RngState::new(plan.seed).split(streams::TRAIN);
    let n_tasks = datasets.len();
    let mut steps = vec![0usize; n_tasks];
    let mut loss_sums = vec![0.0; n_tasks];
    let mut loss_counts = vec![0usize; n_tasks];
    let mut final_losses = vec![f64::NAN; n_tasks];
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..n_tasks).collect();
    for cycle in 1..=plan.cycles {
        order.sort_unstable();
        rng.shuffle(&mut order);
        for &t in &order {
            let d = &datasets[t];
            let mut batch = Vec::with_capacity(plan.batch_size);
            let mut labels = Vec::with_capacity(plan.batch_size);
            for _ in 0..plan.batch_size {
                let s = d.samples[d.train[rng.index(d.train.len())]];
                batch.push(&records[s.record]);
                labels.push(s.label);
            }
            let loss = task_loss_and_grad(model, store, t, &batch, &labels)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("loss of attribute {} at cycle {}", d.task.name, cycle)));
            }
            if options.freeze_shared {
                store.discard_grads(SHARED_PREFIX);
            }
            store.sgd_step(plan.learning_rate).map_err(|e| match e {
                Error::NonFinite(m) => Error::NonFinite(format!("{} (attribute {}, cycle {})", m, d.task.name, cycle)),
                other => other,
            })?;
            steps[t] += 1;
            loss_sums[t] += loss;
            loss_counts[t] += 1;
        }
        let snapshot = cycle == 1 || cycle % plan.eval_every == 0 || cycle == plan.cycles;
        if snapshot {
            for t in 0..n_tasks {
                final_losses[t] = loss_sums[t] / loss_counts[t] as f64;
                loss_sums[t] = 0.0;
                loss_counts[t] = 0;
            }
            info!(
                "cycle {}: mean loss {:.4}",
                cycle,
                final_losses.iter().sum::<f64>() / n_tasks as f64
            );
            if !options.no_history {
                for split in [Split::Train, Split::Test] {
                    for ev in evaluate(model, store, datasets, records, split)? {
                        history.push(HistoryRow {
                            cycle,
                            task: ev.task,
                            split,
                            weighted_f1: ev.weighted_f1,
                            accuracy: ev.accuracy,
                        });
                    }
                }
            }
        }
    }
    Ok(TrainReport {
        history,
        steps,
        final_losses,
    })
}

fn check_alignment(model: &AttrModel, datasets: &[TaskDataset]) -> Result<()> {
    if datasets.len() != model.tasks.len() || datasets.iter().zip(&model.tasks).any(|(d, t)| d.task.name != t.name) {
        return Err(Error::Config("datasets do not match the model's tasks".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskEvaluation {
    pub task: String,
    pub n_samples: usize,
    pub num_classes: usize,
    pub weighted_f1: f64,
    pub accuracy: f64,
    pub baseline_accuracy: f64,
    pub confusion: ConfusionMatrix,
}

/// Metrics per task on one split. Shared representations are computed once
/// per product and reused by every head.
pub fn evaluate(
    model: &AttrModel,
    store: &ParameterStore,
    datasets: &[TaskDataset],
    records: &[ProductRecord],
    split: Split,
) -> Result<Vec<TaskEvaluation>> {
    check_alignment(model, datasets)?;
    let needed: BTreeSet<usize> = datasets
        .iter()
        .flat_map(|d| d.split(split).iter().map(|&s| d.samples[s].record))
        .collect();
    let needed: Vec<usize> = needed.into_iter().collect();
    let refs: Vec<&ProductRecord> = needed.iter().map(|&i| &records[i]).collect();
    let shared = shared_representations(model, store, &refs)?;
    let row_of: BTreeMap<usize, usize> = needed.iter().enumerate().map(|(row, &rec)| (rec, row)).collect();

    let mut out = Vec::with_capacity(datasets.len());
    for d in datasets {
        let idx = d.split(split);
        if idx.is_empty() {
            return Err(Error::Empty(format!("attribute {} has an empty {} split", d.task.name, split.as_str())));
        }
        let rows: Vec<&[f64]> = idx.iter().map(|&s| shared.row(row_of[&d.samples[s].record])).collect();
        let sub = crate::tensor::Tensor::from_rows(
            &rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>(),
            shared.cols(),
        )?;
        let probs = head_probabilities(store, &d.task, &sub)?;
        let pred: Vec<usize> = probs.iter().map(|p| argmax(p).0).collect();
        let truth: Vec<usize> = idx.iter().map(|&s| d.samples[s].label).collect();
        let c = d.task.num_classes();
        out.push(TaskEvaluation {
            task: d.task.name.clone(),
            n_samples: truth.len(),
            num_classes: c,
            weighted_f1: metrics::weighted_f1(&truth, &pred, c)?,
            accuracy: metrics::accuracy(&truth, &pred)?,
            baseline_accuracy: metrics::majority_baseline(&truth, c)?,
            confusion: metrics::confusion(&truth, &pred, &d.task.label_vocab)?,
        });
    }
    Ok(out)
}

/// Builds a model (optionally without one input group), trains it and
/// evaluates it on the test split. With `drop = None` this is the plain
/// train-then-evaluate pipeline.
pub fn ablate(
    records: &[ProductRecord],
    datasets: &[TaskDataset],
    config: &AttrModelConfig,
    sizes: VocabSizes,
    plan: &TrainPlan,
    drop: Option<InputGroup>,
) -> Result<Vec<TaskEvaluation>> {
    let tasks: Vec<TaskSpec> = datasets.iter().map(|d| d.task.clone()).collect();
    let mut init = RngState::new(plan.seed).split(streams::INIT);
    let (model, mut store) = build_attr_model(config, &tasks, sizes, drop, &mut init)?;
    let options = TrainOptions {
        no_history: true,
        ..Default::default()
    };
    train(&model, &mut store, datasets, records, plan, options)?;
    evaluate(&model, &store, datasets, records, Split::Test)
}

/// Metric history as CSV: `cycle,task,split,weighted_f1,accuracy`.
pub fn write_history<W: Write>(out: W, rows: &[HistoryRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["cycle", "task", "split", "weighted_f1", "accuracy"])?;
    for r in rows {
        w.write_record([
            r.cycle.to_string(),
            r.task.clone(),
            r.split.as_str().to_string(),
            r.weighted_f1.to_string(),
            r.accuracy.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::Io {
        path: "<history>".into(),
        source: e,
    })?;
    Ok(())
}
