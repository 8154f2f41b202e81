use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use modabric::data::features::{features_from_lines, load_feature_lines};
use modabric::data::interactions::{load_interaction_set, temporal_split, InteractionSet, ItemRegistry, SplitInteractions};
use modabric::recsys::{
    evaluate_ranking, normalize_features, popularity_counts, similar_items, train_rec, Mode, RankingReport, Ranker, RecModel, RecModelConfig,
};
use modabric::{ParameterStore, Tensor};

use crate::config::RunConfig;
use crate::output::{self, fmt6};
use crate::{CliError, CliResult};

pub const CHECKPOINT: &str = "rec.ckpt";
pub const META_JSON: &str = "rec_model.json";
pub const ITEMS_JSON: &str = "items.json";
pub const HISTORY_CSV: &str = "history.csv";
pub const SNAPSHOT: &str = "resolved_config.toml";

pub const EVAL_COLUMNS: [&str; 7] = ["subset", "model", "runs", "precision_mean", "precision_std", "recall_mean", "recall_std"];

/// Sidecar describing a saved recommender.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecMeta {
    mode: Mode,
    config: RecModelConfig,
    best_epoch: usize,
}

struct Catalogue {
    registry: ItemRegistry,
    /// Normalised item features, one row per registry index.
    features: Tensor,
}

fn load_features(path: &Path) -> CliResult<Catalogue> {
    output::require(path, "item features")?;
    let (lines, rejects) = load_feature_lines(path)?;
    output::report_rejections(path, &rejects);
    let (registry, raw) = features_from_lines(&lines)?;
    Ok(Catalogue {
        registry,
        features: normalize_features(&raw.matrix)?,
    })
}

fn load_log(path: &Path, registry: &ItemRegistry) -> CliResult<InteractionSet> {
    output::require(path, "interaction log")?;
    let (set, rejects) = load_interaction_set(path, registry)?;
    output::report_rejections(path, &rejects);
    Ok(set)
}

fn load_split(features: &Path, interactions: &Path, config: &RunConfig) -> CliResult<(Catalogue, SplitInteractions)> {
    let cat = load_features(features)?;
    let set = load_log(interactions, &cat.registry)?;
    let [h, p, t] = config.windows.resolve()?;
    let split = temporal_split(set, h, p, t)?;
    if split.out_of_window > 0 {
        info!("{} interactions fall outside the configured windows", split.out_of_window);
    }
    Ok((cat, split))
}

pub fn train(mode: Mode, features: &Path, interactions: &Path, out: &Path, config: &RunConfig) -> CliResult<()> {
    let (cat, split) = load_split(features, interactions, config)?;
    let result = train_rec(&split, &cat.features, &config.rec_train(), mode)?;
    info!("best epoch {} of {}", result.best_epoch, result.history.len());
    output::create_dir(out)?;
    output::write_snapshot(&out.join(SNAPSHOT), config)?;
    result.model.store.save(&out.join(CHECKPOINT))?;
    let meta = RecMeta {
        mode,
        config: result.model.config,
        best_epoch: result.best_epoch,
    };
    output::write_text(&out.join(META_JSON), &(serde_json::to_string_pretty(&meta).map_err(modabric::Error::from)? + "\n"))?;
    output::write_text(&out.join(ITEMS_JSON), &cat.registry.to_json()?)?;
    let path = out.join(HISTORY_CSV);
    let mut w = output::csv_writer(&path)?;
    w.write_record(["epoch", "mean_loss", "val_precision", "val_recall"]).map_err(modabric::Error::from)?;
    for e in &result.history {
        w.write_record([e.epoch.to_string(), fmt6(e.mean_loss), fmt6(e.val_precision), fmt6(e.val_recall)])
            .map_err(modabric::Error::from)?;
    }
    output::finish_csv(&path, w)
}

struct Saved {
    mode: Mode,
    model: RecModel,
}

/// Loads a rec-train directory and checks that its item registry matches
/// the feature file.
fn load_saved(dir: &Path, registry: &ItemRegistry) -> CliResult<Saved> {
    let ckpt = dir.join(CHECKPOINT);
    output::require(&ckpt, "checkpoint")?;
    let meta: RecMeta = serde_json::from_str(&output::read_text(&dir.join(META_JSON), "model description")?).map_err(modabric::Error::from)?;
    let items = ItemRegistry::from_json(&output::read_text(&dir.join(ITEMS_JSON), "item registry")?)?;
    if &items != registry {
        return Err(CliError::Usage(format!("{}: item registry differs from the feature file", dir.display())));
    }
    let model = RecModel::from_store(meta.config, ParameterStore::load(&ckpt)?)?;
    Ok(Saved { mode: meta.mode, model })
}

#[derive(Default)]
struct Tally {
    precision: Vec<f64>,
    recall: Vec<f64>,
}

impl Tally {
    fn push(&mut self, r: &RankingReport) {
        self.precision.push(r.precision);
        self.recall.push(r.recall);
    }
}

pub fn eval(features: &Path, interactions: &Path, out: &Path, runs: usize, cold_subset: bool, config: &RunConfig) -> CliResult<()> {
    if runs == 0 {
        return Err(CliError::Usage("--runs must be positive".into()));
    }
    let (cat, split) = load_split(features, interactions, config)?;
    let n_items = cat.registry.len();
    let k = config.eval.k;
    let pop = Ranker::popularity(popularity_counts(split.training_events(), n_items));
    let cold: Vec<bool> = split.seen_in_training().iter().map(|s| !s).collect();
    let mut subsets: Vec<(&str, Option<&[bool]>)> = vec![("all", None)];
    if cold_subset {
        if !cold.iter().any(|&c| c) {
            return Err(modabric::Error::Empty("every item was seen in training; the cold subset is empty".into()).into());
        }
        subsets.push(("cold", Some(&cold)));
    }

    let names = ["popularity", "cf", "content", "hybrid"];
    let mut tallies: BTreeMap<(usize, usize), Tally> = BTreeMap::new();
    let mut per_run = Vec::new();
    for run in 0..runs {
        // Run r uses root seed `seed + r`.
        let mut run_config = config.clone();
        run_config.seed = config.seed + run as u64;
        let rankers = {
            let mut v = vec![(pop.clone(), 0)];
            for mode in [Mode::CfOnly, Mode::ContentOnly, Mode::Hybrid] {
                let res = train_rec(&split, &cat.features, &run_config.rec_train(), mode)?;
                v.push((Ranker::from_model(&res.model, &cat.features, mode)?, res.best_epoch));
            }
            v
        };
        for (si, (subset, mask)) in subsets.iter().enumerate() {
            for (mi, (ranker, best_epoch)) in rankers.iter().enumerate() {
                let r = evaluate_ranking(ranker, &pop, &split, k, config.eval.exclude_seen, *mask)?;
                info!("run {} {} {}: prec@{} {:.5} recall@{} {:.5}", run, subset, names[mi], k, r.precision, k, r.recall);
                tallies.entry((si, mi)).or_default().push(&r);
                per_run.push([
                    subset.to_string(),
                    names[mi].to_string(),
                    run.to_string(),
                    run_config.seed.to_string(),
                    best_epoch.to_string(),
                    fmt6(r.precision),
                    fmt6(r.recall),
                ]);
            }
        }
    }

    output::create_parent(out)?;
    output::write_snapshot(&output::snapshot_path_for(out), config)?;
    let mut w = output::csv_writer(out)?;
    w.write_record(EVAL_COLUMNS).map_err(modabric::Error::from)?;
    for ((si, mi), t) in &tallies {
        let (p, p_std) = modabric::metrics::mean_std(&t.precision);
        let (r, r_std) = modabric::metrics::mean_std(&t.recall);
        w.write_record([
            subsets[*si].0.to_string(),
            names[*mi].to_string(),
            runs.to_string(),
            fmt6(p),
            fmt6(p_std),
            fmt6(r),
            fmt6(r_std),
        ])
        .map_err(modabric::Error::from)?;
    }
    output::finish_csv(out, w)?;

    let runs_path = runs_path_for(out);
    let mut w = output::csv_writer(&runs_path)?;
    w.write_record(["subset", "model", "run", "seed", "best_epoch", "precision", "recall"]).map_err(modabric::Error::from)?;
    for row in &per_run {
        w.write_record(row).map_err(modabric::Error::from)?;
    }
    output::finish_csv(&runs_path, w)
}

/// `results.csv` → `results.runs.csv`.
pub fn runs_path_for(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "eval".into());
    out.with_file_name(format!("{}.runs.csv", stem))
}

pub fn similar(models: &[PathBuf], features: &Path, items: &[String], n: usize, out: &Path) -> CliResult<()> {
    if n == 0 {
        return Err(CliError::Usage("--n must be positive".into()));
    }
    let cat = load_features(features)?;
    let seeds: Vec<usize> = items
        .iter()
        .map(|id| cat.registry.index_of(id).ok_or_else(|| CliError::Usage(format!("unknown product {}", id))))
        .collect::<CliResult<_>>()?;
    let saved: Vec<Saved> = models.iter().map(|m| load_saved(m, &cat.registry)).collect::<CliResult<_>>()?;
    output::create_parent(out)?;
    let mut w = output::csv_writer(out)?;
    w.write_record(["seed_product", "mode", "rank", "product_id", "similarity"]).map_err(modabric::Error::from)?;
    for (&seed, id) in seeds.iter().zip(items) {
        for s in &saved {
            let sims = similar_items(&s.model, &cat.features, seed, s.mode, n)?;
            for (rank, item) in sims.iter().enumerate() {
                w.write_record([id.clone(), s.mode.to_string(), (rank + 1).to_string(), cat.registry.id(item.item).to_string(), fmt6(item.score)])
                    .map_err(modabric::Error::from)?;
            }
        }
    }
    output::finish_csv(out, w)
}

pub fn recommend(model_dir: &Path, features: &Path, interactions: &Path, n: usize, include_seen: bool, out: &Path) -> CliResult<()> {
    if n == 0 {
        return Err(CliError::Usage("--n must be positive".into()));
    }
    let cat = load_features(features)?;
    let saved = load_saved(model_dir, &cat.registry)?;
    let set = load_log(interactions, &cat.registry)?;
    let ranker = Ranker::from_model(&saved.model, &cat.features, saved.mode)?;
    let mut history: Vec<Vec<usize>> = vec![Vec::new(); set.customers.len()];
    for e in &set.events {
        history[e.customer].push(e.item);
    }
    let mut order: Vec<usize> = (0..set.customers.len()).collect();
    order.sort_by(|&a, &b| set.customers[a].cmp(&set.customers[b]));
    let rows: Vec<Vec<[String; 4]>> = order
        .par_iter()
        .map(|&c| {
            let h = &history[c];
            let seen: HashSet<usize> = if include_seen { HashSet::new() } else { h.iter().copied().collect() };
            let ranked = ranker.rank(h, n, |i| !seen.contains(&i))?;
            Ok(ranked
                .iter()
                .enumerate()
                .map(|(r, s)| [set.customers[c].clone(), (r + 1).to_string(), cat.registry.id(s.item).to_string(), fmt6(s.score)])
                .collect())
        })
        .collect::<modabric::Result<_>>()?;
    output::create_parent(out)?;
    let mut w = output::csv_writer(out)?;
    w.write_record(["customer_id", "rank", "product_id", "score"]).map_err(modabric::Error::from)?;
    for row in rows.iter().flatten() {
        w.write_record(row).map_err(modabric::Error::from)?;
    }
    output::finish_csv(out, w)
}
