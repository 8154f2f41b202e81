//! Synthetic catalogue and interaction logs with planted structure.
//!
//! Each attribute takes its signal from one input group. Text attributes
//! plant a signature word in the description, image attributes shift the
//! shot features towards a per-class Gaussian mean, and metadata attributes
//! follow a per-brand preferred value. With probability `signal_strength`
//! the planted evidence shows the true label, otherwise a uniformly random
//! one. Labels are then masked at `mask_rate`.
//!
//! Customers and products get latent taste vectors. A product's vector is
//! built from its (unmasked) labels, type and brand plus idiosyncratic
//! noise, so content features explain most but not all of it. Customers pick
//! products with probability proportional to
//! `exp(popularity_skew · log_pop + taste_strength · ⟨u, p⟩)`. A cohort of
//! cold products only becomes available in the test month.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;

use chrono::{Months, NaiveDate, NaiveTime};
use serde::{Deserialize, Serialize};

use super::catalogue::{write_catalogue, write_taxonomy, CatalogueEntry, TaxonomyEntry, NUM_SHOTS};
use super::features::{write_features, FeatureLine};
use super::interactions::{write_interactions, InteractionKind, RawInteraction, TimeWindow};
use crate::attr::InputGroup;
use crate::error::{Error, Result};
use crate::rng::{streams, RngState};

pub const CATALOGUE_FILE: &str = "catalogue.jsonl";
pub const TAXONOMY_FILE: &str = "taxonomy.json";
pub const INTERACTIONS_FILE: &str = "interactions.csv";
pub const FEATURES_FILE: &str = "item_features.jsonl";
pub const COLD_FILE: &str = "cold_products.txt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthTask {
    pub name: String,
    pub classes: usize,
    pub source: InputGroup,
    /// Empty means every product type.
    #[serde(default)]
    pub applicable_product_types: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthInteractions {
    /// First day of the log (UTC midnight).
    pub start_date: String,
    /// Months of input history before the positive month.
    pub history_months: u32,
    pub latent_dim: usize,
    pub taste_strength: f64,
    pub popularity_skew: f64,
    pub popularity_sigma: f64,
    /// Scale of the product-specific latent component.
    pub idiosyncratic: f64,
    pub train_events_min: usize,
    pub train_events_max: usize,
    pub test_events_min: usize,
    pub test_events_max: usize,
    /// Added to the log-popularity of cold products in the test month.
    pub cold_boost: f64,
    pub purchase_prob: f64,
    pub bag_prob: f64,
}

impl Default for SynthInteractions {
    fn default() -> Self {
        SynthInteractions {
            start_date: "2016-03-01".into(),
            history_months: 11,
            latent_dim: 16,
            taste_strength: 3.0,
            popularity_skew: 1.0,
            popularity_sigma: 1.0,
            idiosyncratic: 0.5,
            train_events_min: 8,
            train_events_max: 30,
            test_events_min: 3,
            test_events_max: 8,
            cold_boost: 1.5,
            purchase_prob: 0.5,
            bag_prob: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub seed: u64,
    /// Total products, cold cohort included.
    pub n_products: usize,
    pub n_cold_products: usize,
    pub n_customers: usize,
    pub product_types: Vec<String>,
    pub n_brands: usize,
    pub n_divisions: usize,
    pub shot_dim: usize,
    pub mask_rate: f64,
    pub signal_strength: f64,
    pub image_separation: f64,
    pub image_noise: f64,
    pub n_filler_words: usize,
    pub title_words: usize,
    pub description_words: usize,
    /// Class prior ∝ (c + 1)^(−decay); 0 gives balanced classes.
    pub class_prior_decay: f64,
    pub min_support: Option<usize>,
    pub tasks: Vec<SynthTask>,
    pub interactions: SynthInteractions,
}

impl Default for SynthSpec {
    fn default() -> Self {
        let task = |name: &str, classes, source, types: &[&str]| SynthTask {
            name: name.into(),
            classes,
            source,
            applicable_product_types: types.iter().map(|t| t.to_string()).collect(),
        };
        SynthSpec {
            seed: 0,
            n_products: 5000,
            n_cold_products: 500,
            n_customers: 2000,
            product_types: ["dress", "top", "trousers", "shoes"].map(String::from).to_vec(),
            n_brands: 24,
            n_divisions: 3,
            shot_dim: 32,
            mask_rate: 0.75,
            signal_strength: 0.85,
            image_separation: 0.3,
            image_noise: 0.45,
            n_filler_words: 300,
            title_words: 3,
            description_words: 14,
            class_prior_decay: 0.7,
            min_support: None,
            tasks: vec![
                task("pattern", 5, InputGroup::Text, &[]),
                task("style", 4, InputGroup::Text, &[]),
                task("colour", 4, InputGroup::Images, &[]),
                task("fit", 3, InputGroup::Metadata, &["dress", "top", "trousers"]),
            ],
            interactions: SynthInteractions::default(),
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_products", self.n_products),
            ("n_customers", self.n_customers),
            ("n_brands", self.n_brands),
            ("n_divisions", self.n_divisions),
            ("shot_dim", self.shot_dim),
            ("n_filler_words", self.n_filler_words),
            ("interactions.latent_dim", self.interactions.latent_dim),
            ("interactions.train_events_min", self.interactions.train_events_min),
            ("interactions.test_events_min", self.interactions.test_events_min),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{} must be positive", name)));
            }
        }
        if self.n_cold_products >= self.n_products {
            return Err(Error::Config("n_cold_products must be below n_products".into()));
        }
        if self.product_types.is_empty() || self.tasks.is_empty() {
            return Err(Error::Config("product_types and tasks must be non-empty".into()));
        }
        for (name, p) in [
            ("mask_rate", self.mask_rate),
            ("signal_strength", self.signal_strength),
            ("interactions.purchase_prob", self.interactions.purchase_prob),
            ("interactions.bag_prob", self.interactions.bag_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{} must lie in [0, 1]", name)));
            }
        }
        if self.interactions.purchase_prob + self.interactions.bag_prob > 1.0 {
            return Err(Error::Config("purchase_prob + bag_prob must not exceed 1".into()));
        }
        let i = &self.interactions;
        if i.train_events_max < i.train_events_min || i.test_events_max < i.test_events_min {
            return Err(Error::Config("event count ranges are reversed".into()));
        }
        let types: HashSet<&str> = self.product_types.iter().map(String::as_str).collect();
        let mut names = HashSet::new();
        for t in &self.tasks {
            if t.classes < 2 {
                return Err(Error::Config(format!("task {} needs at least two classes", t.name)));
            }
            if !names.insert(t.name.as_str()) {
                return Err(Error::Duplicate(format!("task {}", t.name)));
            }
            if let Some(bad) = t.applicable_product_types.iter().find(|p| !types.contains(p.as_str())) {
                return Err(Error::Config(format!("task {}: unknown product type {}", t.name, bad)));
            }
        }
        self.windows().map(|_| ())
    }

    /// History, positive and test windows implied by the start date.
    pub fn windows(&self) -> Result<[TimeWindow; 3]> {
        let i = &self.interactions;
        let start = NaiveDate::parse_from_str(&i.start_date, "%Y-%m-%d")
            .map_err(|e| Error::Config(format!("interactions.start_date: {}", e)))?;
        let at = |months: u32| -> Result<i64> {
            let d = start
                .checked_add_months(Months::new(months))
                .ok_or_else(|| Error::Config("interactions.start_date out of range".into()))?;
            Ok(d.and_time(NaiveTime::MIN).and_utc().timestamp())
        };
        let h = i.history_months;
        Ok([
            TimeWindow { start: at(0)?, end: at(h)? },
            TimeWindow { start: at(h)?, end: at(h + 1)? },
            TimeWindow { start: at(h + 1)?, end: at(h + 2)? },
        ])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthEvent {
    pub customer: usize,
    pub product: usize,
    pub timestamp: i64,
    pub kind: InteractionKind,
}

/// Everything the generator produces, before it is written out.
#[derive(Debug, Clone)]
pub struct SynthData {
    pub catalogue: Vec<CatalogueEntry>,
    pub taxonomy: Vec<TaxonomyEntry>,
    pub customers: Vec<String>,
    pub events: Vec<SynthEvent>,
    pub features: Vec<FeatureLine>,
    /// Product indices of the cold cohort.
    pub cold_products: Vec<usize>,
    /// Unmasked labels per product (`None` when not applicable).
    pub truth: Vec<BTreeMap<String, usize>>,
}

fn class_prior(classes: usize, decay: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..classes).map(|c| ((c + 1) as f64).powf(-decay)).collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|v| v / total).collect()
}

fn draw_categorical(cdf: &[f64], rng: &mut RngState) -> usize {
    let u = rng.uniform(0.0, *cdf.last().unwrap());
    cdf.partition_point(|&c| c <= u).min(cdf.len() - 1)
}

fn cumulative(weights: impl IntoIterator<Item = f64>) -> Vec<f64> {
    let mut acc = 0.0;
    weights
        .into_iter()
        .map(|w| {
            acc += w;
            acc
        })
        .collect()
}

fn round4(x: f64) -> f64 {
    (x * 1e4).round() / 1e4
}

fn gaussian_vec(n: usize, scale: f64, rng: &mut RngState) -> Vec<f64> {
    (0..n).map(|_| scale * rng.normal()).collect()
}

fn signature_word(task: usize, class: usize) -> String {
    format!("sig{}v{}", task, class)
}

fn filler_word(i: usize) -> String {
    format!("w{:03}", i)
}

pub fn generate_synthetic(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let root = RngState::new(spec.seed);
    let mut rng = root.split(streams::SYNTH_CATALOGUE);
    let n_types = spec.product_types.len();
    let type_index: BTreeMap<&str, usize> = spec.product_types.iter().enumerate().map(|(i, t)| (t.as_str(), i)).collect();
    let applicable: Vec<BTreeSet<usize>> = spec
        .tasks
        .iter()
        .map(|t| {
            if t.applicable_product_types.is_empty() {
                (0..n_types).collect()
            } else {
                t.applicable_product_types.iter().map(|p| type_index[p.as_str()]).collect()
            }
        })
        .collect();
    let priors: Vec<Vec<f64>> = spec.tasks.iter().map(|t| cumulative(class_prior(t.classes, spec.class_prior_decay))).collect();

    // Planted parameters.
    let type_means: Vec<Vec<f64>> = (0..n_types).map(|_| gaussian_vec(spec.shot_dim, spec.image_separation, &mut rng)).collect();
    let class_means: Vec<Vec<Vec<f64>>> = spec
        .tasks
        .iter()
        .map(|t| (0..t.classes).map(|_| gaussian_vec(spec.shot_dim, spec.image_separation, &mut rng)).collect())
        .collect();
    // Preferred values are spread over brands by prior quantile, so the
    // label marginal follows the prior.
    let brand_class: Vec<Vec<usize>> = priors
        .iter()
        .map(|cdf| {
            let total = cdf.last().unwrap();
            let mut classes: Vec<usize> = (0..spec.n_brands)
                .map(|b| {
                    let u = total * (b as f64 + 0.5) / spec.n_brands as f64;
                    cdf.partition_point(|&c| c <= u).min(cdf.len() - 1)
                })
                .collect();
            rng.shuffle(&mut classes);
            classes
        })
        .collect();

    let brands: Vec<String> = (0..spec.n_brands).map(|b| format!("brand{:02}", b)).collect();
    let divisions: Vec<String> = (0..spec.n_divisions).map(|d| format!("division{}", d)).collect();

    let mut catalogue = Vec::with_capacity(spec.n_products);
    let mut truth = Vec::with_capacity(spec.n_products);
    let mut meta = Vec::with_capacity(spec.n_products);
    for p in 0..spec.n_products {
        let type_id = rng.index(n_types);
        let brand = rng.index(spec.n_brands);
        let division = rng.index(spec.n_divisions);
        let mut labels = BTreeMap::new();
        let mut shown: Vec<Option<usize>> = vec![None; spec.tasks.len()];
        for (t, task) in spec.tasks.iter().enumerate() {
            if !applicable[t].contains(&type_id) {
                continue;
            }
            let uniform_class = |rng: &mut RngState| rng.index(task.classes);
            let label = if task.source == InputGroup::Metadata && rng.bernoulli(spec.signal_strength) {
                brand_class[t][brand]
            } else {
                draw_categorical(&priors[t], &mut rng)
            };
            if task.source != InputGroup::Metadata {
                shown[t] = Some(if rng.bernoulli(spec.signal_strength) {
                    label
                } else {
                    uniform_class(&mut rng)
                });
            }
            labels.insert(task.name.clone(), label);
        }

        let mut title: Vec<String> = vec![spec.product_types[type_id].clone(), brands[brand].clone()];
        title.extend((0..spec.title_words).map(|_| filler_word(rng.index(spec.n_filler_words))));
        let mut description: Vec<String> = (0..spec.description_words)
            .map(|_| filler_word(rng.index(spec.n_filler_words)))
            .collect();
        for (t, task) in spec.tasks.iter().enumerate() {
            if let (InputGroup::Text, Some(c)) = (task.source, shown[t]) {
                let pos = rng.index(description.len() + 1);
                description.insert(pos, signature_word(t, c));
            }
        }

        let mut base = type_means[type_id].clone();
        for (t, task) in spec.tasks.iter().enumerate() {
            if let (InputGroup::Images, Some(c)) = (task.source, shown[t]) {
                for (b, m) in base.iter_mut().zip(&class_means[t][c]) {
                    *b += m;
                }
            }
        }
        let shots: Vec<Vec<f64>> = (0..NUM_SHOTS)
            .map(|_| base.iter().map(|b| round4(b + spec.image_noise * rng.normal())).collect())
            .collect();

        let attributes: BTreeMap<String, Option<String>> = labels
            .iter()
            .map(|(name, &c)| {
                let value = (!rng.bernoulli(spec.mask_rate)).then(|| format!("{}_{}", name, c));
                (name.clone(), value)
            })
            .collect();
        catalogue.push(CatalogueEntry {
            product_id: format!("p{:05}", p),
            product_type: spec.product_types[type_id].clone(),
            brand: brands[brand].clone(),
            division: divisions[division].clone(),
            title: title.join(" "),
            description: description.join(" "),
            image_features: Some(shots),
            image_features_ref: None,
            attributes,
        });
        truth.push(labels);
        meta.push((type_id, brand, division));
    }

    let taxonomy: Vec<TaxonomyEntry> = spec
        .tasks
        .iter()
        .zip(&applicable)
        .map(|(t, types)| TaxonomyEntry {
            name: t.name.clone(),
            applicable_product_types: types.iter().map(|&i| spec.product_types[i].clone()).collect(),
            min_support: spec.min_support,
        })
        .collect();

    let features = build_features(spec, &catalogue, &truth, &meta);
    let (customers, events) = generate_events(spec, &root, &truth, &meta)?;
    let cold_products = (spec.n_products - spec.n_cold_products..spec.n_products).collect();
    Ok(SynthData {
        catalogue,
        taxonomy,
        customers,
        events,
        features,
        cold_products,
        truth,
    })
}

fn one_hot(n: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[i] = 1.0;
    v
}

/// Content blocks per product: ground-truth attribute one-hots (standing in
/// for predicted attributes), type, brand, division and the mean shot.
fn build_features(
    spec: &SynthSpec,
    catalogue: &[CatalogueEntry],
    truth: &[BTreeMap<String, usize>],
    meta: &[(usize, usize, usize)],
) -> Vec<FeatureLine> {
    catalogue
        .iter()
        .zip(truth)
        .zip(meta)
        .map(|((entry, labels), &(type_id, brand, division))| {
            let mut attributes = Vec::new();
            for task in &spec.tasks {
                let mut block = vec![0.0; task.classes];
                if let Some(&c) = labels.get(&task.name) {
                    block[c] = 1.0;
                }
                attributes.extend(block);
            }
            let shots = entry.image_features.as_ref().unwrap();
            let image: Vec<f64> = (0..spec.shot_dim)
                .map(|d| round4(shots.iter().map(|s| s[d]).sum::<f64>() / NUM_SHOTS as f64))
                .collect();
            FeatureLine {
                product_id: entry.product_id.clone(),
                blocks: BTreeMap::from([
                    ("attributes".to_string(), attributes),
                    ("brand".to_string(), one_hot(spec.n_brands, brand)),
                    ("division".to_string(), one_hot(spec.n_divisions, division)),
                    ("image".to_string(), image),
                    ("product_type".to_string(), one_hot(spec.product_types.len(), type_id)),
                ]),
            }
        })
        .collect()
}

fn generate_events(
    spec: &SynthSpec,
    root: &RngState,
    truth: &[BTreeMap<String, usize>],
    meta: &[(usize, usize, usize)],
) -> Result<(Vec<String>, Vec<SynthEvent>)> {
    let cfg = &spec.interactions;
    let mut rng = root.split(streams::SYNTH_INTERACTIONS);
    let d = cfg.latent_dim;
    let [history, positive, test] = spec.windows()?;

    // Latent factors: one vector per label value, type and brand.
    let label_vecs: Vec<Vec<Vec<f64>>> = spec
        .tasks
        .iter()
        .map(|t| (0..t.classes).map(|_| gaussian_vec(d, 1.0, &mut rng)).collect())
        .collect();
    let type_vecs: Vec<Vec<f64>> = (0..spec.product_types.len()).map(|_| gaussian_vec(d, 1.0, &mut rng)).collect();
    let brand_vecs: Vec<Vec<f64>> = (0..spec.n_brands).map(|_| gaussian_vec(d, 1.0, &mut rng)).collect();
    let n = spec.n_products;
    let mut item_vecs = Vec::with_capacity(n);
    let mut log_pop = Vec::with_capacity(n);
    for (labels, &(type_id, brand, _)) in truth.iter().zip(meta) {
        let mut v: Vec<f64> = type_vecs[type_id].iter().zip(&brand_vecs[brand]).map(|(a, b)| a + b).collect();
        for (t, task) in spec.tasks.iter().enumerate() {
            if let Some(&c) = labels.get(&task.name) {
                for (x, l) in v.iter_mut().zip(&label_vecs[t][c]) {
                    *x += l;
                }
            }
        }
        let parts = (2 + labels.len()) as f64;
        for x in v.iter_mut() {
            *x = *x / parts.sqrt() + cfg.idiosyncratic * rng.normal();
        }
        item_vecs.push(v);
        log_pop.push(cfg.popularity_sigma * rng.normal());
    }

    let n_warm = n - spec.n_cold_products;
    let width = (spec.n_customers.max(2) - 1).to_string().len();
    let customers: Vec<String> = (0..spec.n_customers).map(|c| format!("c{:0w$}", c, w = width)).collect();
    let kind_cdf = cumulative([cfg.purchase_prob, cfg.bag_prob, 1.0 - cfg.purchase_prob - cfg.bag_prob]);
    let kinds = [InteractionKind::Purchase, InteractionKind::Bag, InteractionKind::Save];
    let scale = (d as f64).sqrt();
    let mut events = Vec::new();
    for c in 0..spec.n_customers {
        let u = gaussian_vec(d, 1.0 / scale, &mut rng);
        let logits: Vec<f64> = item_vecs
            .iter()
            .zip(&log_pop)
            .map(|(v, lp)| cfg.popularity_skew * lp + cfg.taste_strength * crate::tensor::dot(&u, v))
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let warm_cdf = cumulative(logits[..n_warm].iter().map(|l| (l - max).exp()));
        let test_cdf = cumulative(logits.iter().enumerate().map(|(i, l)| {
            let boost = if i >= n_warm { cfg.popularity_skew * cfg.cold_boost } else { 0.0 };
            (l + boost - max).exp()
        }));

        let n_train = cfg.train_events_min + rng.index(cfg.train_events_max - cfg.train_events_min + 1);
        let mut seen = HashSet::new();
        for _ in 0..n_train {
            let product = draw_categorical(&warm_cdf, &mut rng);
            seen.insert(product);
            events.push(SynthEvent {
                customer: c,
                product,
                timestamp: history.start + rng.index((positive.end - history.start) as usize) as i64,
                kind: kinds[draw_categorical(&kind_cdf, &mut rng)],
            });
        }
        let n_test = cfg.test_events_min + rng.index(cfg.test_events_max - cfg.test_events_min + 1);
        for _ in 0..n_test {
            // Test-month choices avoid products the customer already has.
            let mut product = draw_categorical(&test_cdf, &mut rng);
            for _ in 0..50 {
                if !seen.contains(&product) {
                    break;
                }
                product = draw_categorical(&test_cdf, &mut rng);
            }
            seen.insert(product);
            events.push(SynthEvent {
                customer: c,
                product,
                timestamp: test.start + rng.index((test.end - test.start) as usize) as i64,
                kind: kinds[draw_categorical(&kind_cdf, &mut rng)],
            });
        }
    }
    events.sort_by_key(|e| (e.timestamp, e.customer, e.product));
    Ok((customers, events))
}

/// Writes the catalogue, taxonomy, interaction log, item features and the
/// list of cold products into `dir`.
pub fn write_synthetic(data: &SynthData, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_catalogue(&dir.join(CATALOGUE_FILE), &data.catalogue)?;
    write_taxonomy(&dir.join(TAXONOMY_FILE), &data.taxonomy)?;
    write_interactions(
        &dir.join(INTERACTIONS_FILE),
        data.events.iter().map(|e| RawInteraction {
            customer_id: &data.customers[e.customer],
            product_id: &data.catalogue[e.product].product_id,
            timestamp: e.timestamp,
            kind: e.kind,
        }),
    )?;
    write_features(&dir.join(FEATURES_FILE), &data.features)?;
    let cold: String = data
        .cold_products
        .iter()
        .map(|&p| format!("{}\n", data.catalogue[p].product_id))
        .collect();
    let path = dir.join(COLD_FILE);
    std::fs::write(&path, cold).map_err(|e| Error::io(&path, e))
}
