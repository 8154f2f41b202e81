use std::collections::BTreeMap;
use std::path::Path;

use log::{info, warn};
use rayon::prelude::*;
use serde::Serialize;

use modabric::attr::{build_attr_model, predict_all, AttrModel, InputGroup, Prediction, VocabSizes};
use modabric::data::catalogue::{load_catalogue, load_taxonomy, CatalogueEntry, CatalogueVocabs, ProductRecord, TaxonomyEntry};
use modabric::multitask::{self, build_task_datasets, Split, TaskDatasets, TaskEvaluation, TrainOptions};
use modabric::rng::{streams, RngState};
use modabric::ParameterStore;

use crate::config::RunConfig;
use crate::output::{self, fmt6};
use crate::{CliError, CliResult};

pub const CHECKPOINT: &str = "model.ckpt";
pub const MODEL_JSON: &str = "model.json";
pub const VOCABS_JSON: &str = "vocabs.json";
pub const HISTORY_CSV: &str = "history.csv";
pub const METRICS_CSV: &str = "test_metrics.csv";
pub const CONFUSION_DIR: &str = "confusion";
pub const SNAPSHOT: &str = "resolved_config.toml";

/// Column order of the per-attribute metrics table.
pub const EVAL_COLUMNS: [&str; 6] = ["attribute", "samples", "classes", "weighted_f1", "accuracy", "baseline_accuracy"];
pub const ABLATION_COLUMNS: [&str; 5] = ["attribute", "variant", "weighted_f1", "accuracy", "baseline_accuracy"];

fn load_entries(catalogue: &Path) -> CliResult<Vec<CatalogueEntry>> {
    output::require(catalogue, "catalogue")?;
    let loaded = load_catalogue(catalogue)?;
    output::report_rejections(catalogue, &loaded.rejects);
    Ok(loaded.records)
}

fn load_tax(taxonomy: &Path) -> CliResult<Vec<TaxonomyEntry>> {
    output::require(taxonomy, "taxonomy")?;
    Ok(load_taxonomy(taxonomy)?)
}

fn datasets(records: &[ProductRecord], vocabs: &CatalogueVocabs, taxonomy: &[TaxonomyEntry], config: &RunConfig) -> CliResult<TaskDatasets> {
    let d = build_task_datasets(records, &vocabs.product_types, taxonomy, config.data.min_support, config.data.split_fraction, config.seed)?;
    for t in &d.dropped {
        warn!("attribute {} dropped: {}", t.name, t.reason);
    }
    if d.datasets.is_empty() {
        return Err(modabric::Error::Empty("no attribute survived filtering".into()).into());
    }
    Ok(d)
}

fn sizes(vocabs: &CatalogueVocabs) -> VocabSizes {
    VocabSizes {
        words: vocabs.words.len(),
        product_types: vocabs.product_types.len(),
        brands: vocabs.brands.len(),
        divisions: vocabs.divisions.len(),
        shot_dim: vocabs.shot_dim,
    }
}

fn write_metrics(path: &Path, evals: &[TaskEvaluation]) -> CliResult<()> {
    let mut w = output::csv_writer(path)?;
    w.write_record(EVAL_COLUMNS).map_err(modabric::Error::from)?;
    for e in evals {
        w.write_record([
            e.task.clone(),
            e.n_samples.to_string(),
            e.num_classes.to_string(),
            fmt6(e.weighted_f1),
            fmt6(e.accuracy),
            fmt6(e.baseline_accuracy),
        ])
        .map_err(modabric::Error::from)?;
    }
    output::finish_csv(path, w)
}

pub fn train(catalogue: &Path, taxonomy: &Path, out: &Path, config: &RunConfig) -> CliResult<()> {
    let entries = load_entries(catalogue)?;
    let taxonomy = load_tax(taxonomy)?;
    let vocabs = CatalogueVocabs::build(&entries, config.attr_model.min_token_count, config.attr_model.max_seq_len)?;
    let records = vocabs.encode_all(&entries)?;
    let data = datasets(&records, &vocabs, &taxonomy, config)?;
    let tasks = data.tasks();
    let mut init = RngState::new(config.seed).split(streams::INIT);
    let (model, mut store) = build_attr_model(&config.attr_model, &tasks, sizes(&vocabs), None, &mut init)?;
    info!(
        "{} products, {} attributes, {} parameters",
        records.len(),
        tasks.len(),
        store.num_scalars()
    );
    let report = multitask::train(&model, &mut store, &data.datasets, &records, &config.train_plan(), TrainOptions::default())?;
    let evals = multitask::evaluate(&model, &store, &data.datasets, &records, Split::Test)?;

    output::create_dir(&out.join(CONFUSION_DIR))?;
    output::write_snapshot(&out.join(SNAPSHOT), config)?;
    store.save(&out.join(CHECKPOINT))?;
    output::write_text(&out.join(MODEL_JSON), &(serde_json::to_string_pretty(&model).map_err(modabric::Error::from)? + "\n"))?;
    output::write_text(&out.join(VOCABS_JSON), &serde_json::to_string(&vocabs).map_err(modabric::Error::from)?)?;
    let hist = out.join(HISTORY_CSV);
    let w = output::buffered(&hist)?;
    multitask::write_history(w, &report.history)?;
    write_metrics(&out.join(METRICS_CSV), &evals)?;
    for e in &evals {
        let path = out.join(CONFUSION_DIR).join(format!("{}.csv", e.task));
        e.confusion.write_csv(output::buffered(&path)?, false)?;
        info!("{}: weighted F1 {:.4}, accuracy {:.4} (baseline {:.4})", e.task, e.weighted_f1, e.accuracy, e.baseline_accuracy);
    }
    Ok(())
}

/// A trained attribute model directory.
struct Trained {
    model: AttrModel,
    store: ParameterStore,
    vocabs: CatalogueVocabs,
    config: RunConfig,
}

fn load_trained(dir: &Path) -> CliResult<Trained> {
    let ckpt = dir.join(CHECKPOINT);
    output::require(&ckpt, "checkpoint")?;
    let model: AttrModel = serde_json::from_str(&output::read_text(&dir.join(MODEL_JSON), "model description")?).map_err(modabric::Error::from)?;
    let vocabs: CatalogueVocabs = serde_json::from_str(&output::read_text(&dir.join(VOCABS_JSON), "vocabularies")?).map_err(modabric::Error::from)?;
    let config = RunConfig::resolve(Some(&dir.join(SNAPSHOT)), &[], None)?;
    let store = ParameterStore::load(&ckpt)?;
    if store.num_scalars() != model.expected_num_scalars() {
        return Err(modabric::Error::Checkpoint(format!(
            "{} holds {} scalars, the model needs {}",
            ckpt.display(),
            store.num_scalars(),
            model.expected_num_scalars()
        ))
        .into());
    }
    Ok(Trained {
        model,
        store,
        vocabs,
        config,
    })
}

pub fn eval(model_dir: &Path, catalogue: &Path, taxonomy: &Path, out: &Path, split: &str) -> CliResult<()> {
    let t = load_trained(model_dir)?;
    let entries = load_entries(catalogue)?;
    let taxonomy = load_tax(taxonomy)?;
    let records = t.vocabs.encode_all(&entries)?;
    let data = datasets(&records, &t.vocabs, &taxonomy, &t.config)?;
    let same = data.datasets.len() == t.model.tasks.len()
        && data
            .datasets
            .iter()
            .zip(&t.model.tasks)
            .all(|(d, m)| d.task.name == m.name && d.task.label_vocab == m.label_vocab);
    if !same {
        return Err(CliError::Usage(
            "catalogue and taxonomy do not yield the attributes and labels the model was trained on".into(),
        ));
    }
    let split = if split == "train" { Split::Train } else { Split::Test };
    let evals = multitask::evaluate(&t.model, &t.store, &data.datasets, &records, split)?;
    output::create_parent(out)?;
    write_metrics(out, &evals)
}

pub fn ablate(catalogue: &Path, taxonomy: &Path, out: &Path, config: &RunConfig) -> CliResult<()> {
    let entries = load_entries(catalogue)?;
    let taxonomy = load_tax(taxonomy)?;
    let vocabs = CatalogueVocabs::build(&entries, config.attr_model.min_token_count, config.attr_model.max_seq_len)?;
    let records = vocabs.encode_all(&entries)?;
    let data = datasets(&records, &vocabs, &taxonomy, config)?;
    let plan = config.train_plan();
    let variants: [(&str, Option<InputGroup>); 4] = [
        ("full", None),
        ("no_text", Some(InputGroup::Text)),
        ("no_images", Some(InputGroup::Images)),
        ("no_metadata", Some(InputGroup::Metadata)),
    ];
    let mut results = Vec::new();
    for (name, drop) in variants {
        let evals = multitask::ablate(&records, &data.datasets, &config.attr_model, sizes(&vocabs), &plan, drop)?;
        let mean = evals.iter().map(|e| e.weighted_f1).sum::<f64>() / evals.len() as f64;
        info!("{}: mean weighted F1 {:.4}", name, mean);
        results.push((name, evals));
    }
    output::create_parent(out)?;
    output::write_snapshot(&output::snapshot_path_for(out), config)?;
    let mut w = output::csv_writer(out)?;
    w.write_record(ABLATION_COLUMNS).map_err(modabric::Error::from)?;
    for (i, d) in data.datasets.iter().enumerate() {
        for (name, evals) in &results {
            let e = &evals[i];
            debug_assert_eq!(e.task, d.task.name);
            w.write_record([e.task.clone(), name.to_string(), fmt6(e.weighted_f1), fmt6(e.accuracy), fmt6(e.baseline_accuracy)])
                .map_err(modabric::Error::from)?;
        }
    }
    output::finish_csv(out, w)
}

#[derive(Serialize)]
struct PredictionLine<'a> {
    product_id: &'a str,
    attributes: BTreeMap<String, Prediction>,
}

pub fn predict(model_dir: &Path, catalogue: &Path, out: &Path) -> CliResult<()> {
    let t = load_trained(model_dir)?;
    let entries = load_entries(catalogue)?;
    let lines: Vec<String> = entries
        .par_iter()
        .map(|e| {
            let record = t.vocabs.encode(e)?;
            let attributes = predict_all(&t.model, &t.store, &record)?;
            Ok(serde_json::to_string(&PredictionLine {
                product_id: &e.product_id,
                attributes,
            })?)
        })
        .collect::<modabric::Result<_>>()?;
    output::create_parent(out)?;
    let mut text = lines.join("\n");
    if !text.is_empty() {
        text.push('\n');
    }
    output::write_text(out, &text)
}
