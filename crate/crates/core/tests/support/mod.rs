//! Finite-difference gradient checks and brute-force metric oracles shared
//! by the integration tests and the acceptance run.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, HashSet};

use modabric::attr::{build_attr_model, task_loss_and_grad, AttrModelConfig, ProductRecord, TaskSpec, VocabSizes};
use modabric::data::catalogue::NUM_SHOTS;
use modabric::metrics;
use modabric::ops::{self, Activation};
use modabric::recsys::{wmrb_batch, Instance, Mode, RecModel, RecModelConfig};
use modabric::{ParameterStore, RngState, Tensor};

pub const FD_STEP: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradReport {
    pub name: String,
    pub instances: usize,
    /// Largest relative error over all instances.
    pub worst: f64,
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, 1e-8)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-8)
}

/// Central differences of `f` at `x`.
pub fn numeric_grad(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + FD_STEP;
            let up = f(&probe);
            probe[i] = orig - FD_STEP;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

fn rand_vec(rng: &mut RngState, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.uniform(-scale, scale)).collect()
}

fn size(rng: &mut RngState, lo: usize, hi: usize) -> usize {
    lo + rng.index(hi - lo + 1)
}

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn weighted_sum(out: &Tensor, r: &[f64]) -> f64 {
    out.data().iter().zip(r).map(|(a, b)| a * b).sum()
}

fn report(name: &str, errs: Vec<f64>) -> GradReport {
    GradReport {
        name: name.to_string(),
        instances: errs.len(),
        worst: errs.into_iter().fold(0.0, f64::max),
    }
}

/// Dense layer: gradients of `Σ r ⊙ act(xW + b)` with respect to x, W and b.
pub fn check_dense(activation: Activation, instances: usize, seed: u64) -> GradReport {
    let mut rng = RngState::new(seed);
    let mut errs = Vec::new();
    for _ in 0..instances {
        let (batch, fan_in, fan_out) = (size(&mut rng, 1, 4), size(&mut rng, 1, 5), size(&mut rng, 1, 4));
        let (nx, nw) = (batch * fan_in, fan_in * fan_out);
        let theta = rand_vec(&mut rng, nx + nw + fan_out, 1.0);
        let r = rand_vec(&mut rng, batch * fan_out, 1.0);
        let unpack = |th: &[f64]| {
            (
                t(&[batch, fan_in], &th[..nx]),
                t(&[fan_in, fan_out], &th[nx..nx + nw]),
                t(&[fan_out], &th[nx + nw..]),
            )
        };
        let f = |th: &[f64]| {
            let (x, w, b) = unpack(th);
            weighted_sum(&ops::dense_forward(&x, &w, &b, activation).unwrap(), &r)
        };
        let (x, w, b) = unpack(&theta);
        let out = ops::dense_forward(&x, &w, &b, activation).unwrap();
        let g = ops::dense_backward(&x, &w, &out, activation, &t(&[batch, fan_out], &r)).unwrap();
        let analytic: Vec<f64> = [g.x.data(), g.w.data(), g.b.data()].concat();
        errs.push(rel_err(&analytic, &numeric_grad(f, &theta)));
    }
    report(&format!("dense ({:?})", activation).to_lowercase(), errs)
}

/// Embedding lookup with repeated ids: gradient with respect to the table.
pub fn check_embedding(instances: usize, seed: u64) -> GradReport {
    let mut rng = RngState::new(seed);
    let mut errs = Vec::new();
    for _ in 0..instances {
        let (vocab, dim, n) = (size(&mut rng, 1, 6), size(&mut rng, 1, 4), size(&mut rng, 1, 8));
        let ids: Vec<usize> = (0..n).map(|_| rng.index(vocab)).collect();
        let theta = rand_vec(&mut rng, vocab * dim, 1.0);
        let r = rand_vec(&mut rng, n * dim, 1.0);
        let f = |th: &[f64]| weighted_sum(&ops::embedding_lookup(&t(&[vocab, dim], th), &ids).unwrap(), &r);
        let mut g = Tensor::zeros(&[vocab, dim]);
        ops::embedding_backward(&mut g, &ids, &t(&[n, dim], &r)).unwrap();
        errs.push(rel_err(g.data(), &numeric_grad(f, &theta)));
    }
    report("embedding lookup", errs)
}

/// Convolution with relu: gradients with respect to sequence, filters, bias.
pub fn check_conv1d(instances: usize, seed: u64) -> GradReport {
    let mut rng = RngState::new(seed);
    let mut errs = Vec::new();
    for _ in 0..instances {
        let (width, dim, nfilt) = (size(&mut rng, 1, 3), size(&mut rng, 1, 3), size(&mut rng, 1, 3));
        let len = width + rng.index(5);
        let positions = len - width + 1;
        let (ns, nf) = (len * dim, width * dim * nfilt);
        let theta = rand_vec(&mut rng, ns + nf + nfilt, 1.0);
        let r = rand_vec(&mut rng, positions * nfilt, 1.0);
        let unpack = |th: &[f64]| {
            (
                t(&[len, dim], &th[..ns]),
                t(&[width, dim, nfilt], &th[ns..ns + nf]),
                t(&[nfilt], &th[ns + nf..]),
            )
        };
        let f = |th: &[f64]| {
            let (s, w, b) = unpack(th);
            weighted_sum(&ops::conv1d_forward(&s, &w, &b).unwrap(), &r)
        };
        let (s, w, b) = unpack(&theta);
        let out = ops::conv1d_forward(&s, &w, &b).unwrap();
        let g = ops::conv1d_backward(&s, &w, &out, &t(&[positions, nfilt], &r)).unwrap();
        let analytic: Vec<f64> = [g.seq.data(), g.filters.data(), g.bias.data()].concat();
        errs.push(rel_err(&analytic, &numeric_grad(f, &theta)));
    }
    report("conv1d + relu", errs)
}

pub fn check_max_over_time(instances: usize, seed: u64) -> GradReport {
    let mut rng = RngState::new(seed);
    let mut errs = Vec::new();
    for _ in 0..instances {
        let (positions, nfilt) = (size(&mut rng, 1, 6), size(&mut rng, 1, 4));
        let theta = rand_vec(&mut rng, positions * nfilt, 1.0);
        let r = rand_vec(&mut rng, nfilt, 1.0);
        let f = |th: &[f64]| weighted_sum(&ops::max_over_time(&t(&[positions, nfilt], th)).unwrap().0, &r);
        let (_, argmax) = ops::max_over_time(&t(&[positions, nfilt], &theta)).unwrap();
        let g = ops::max_over_time_backward(positions, &argmax, &r).unwrap();
        errs.push(rel_err(g.data(), &numeric_grad(f, &theta)));
    }
    report("max over time", errs)
}

pub fn check_softmax_cross_entropy(instances: usize, seed: u64) -> GradReport {
    let mut rng = RngState::new(seed);
    let mut errs = Vec::new();
    for _ in 0..instances {
        let (batch, classes) = (size(&mut rng, 1, 5), size(&mut rng, 2, 6));
        let labels: Vec<usize> = (0..batch).map(|_| rng.index(classes)).collect();
        let weights = Tensor::vector((0..classes).map(|_| rng.uniform(0.1, 10.0)).collect());
        let theta = rand_vec(&mut rng, batch * classes, 3.0);
        let f = |th: &[f64]| ops::softmax_cross_entropy(&t(&[batch, classes], th), &labels, &weights).unwrap().0;
        let (_, g) = ops::softmax_cross_entropy(&t(&[batch, classes], &theta), &labels, &weights).unwrap();
        errs.push(rel_err(g.data(), &numeric_grad(f, &theta)));
    }
    report("weighted softmax cross-entropy", errs)
}

/// Flattens every parameter of `store` in name order.
pub fn flatten(store: &ParameterStore) -> Vec<f64> {
    let names: Vec<String> = store.names().map(String::from).collect();
    names.iter().flat_map(|n| store.get(n).unwrap().data().to_vec()).collect()
}

pub fn unflatten(store: &mut ParameterStore, theta: &[f64]) {
    let names: Vec<String> = store.names().map(String::from).collect();
    let mut at = 0;
    for n in names {
        let v = store.value_mut(&n).unwrap();
        let len = v.len();
        v.data_mut().copy_from_slice(&theta[at..at + len]);
        at += len;
    }
}

pub fn flatten_grads(store: &ParameterStore) -> Vec<f64> {
    let names: Vec<String> = store.names().map(String::from).collect();
    names.iter().flat_map(|n| store.grad(n).unwrap().data().to_vec()).collect()
}

/// WMRB over a small batch, every parameter of the model perturbed.
pub fn check_wmrb(mode: Mode, hidden: Option<usize>, instances: usize, seed: u64) -> GradReport {
    let mut rng = RngState::new(seed);
    let mut errs = Vec::new();
    for _ in 0..instances {
        let (n_items, k, feature_dim) = (size(&mut rng, 6, 10), size(&mut rng, 1, 4), size(&mut rng, 1, 5));
        let config = RecModelConfig {
            k,
            hidden_units: hidden,
            n_items,
            feature_dim,
        };
        let mut model = RecModel::new(config, &mut rng).unwrap();
        // Spread the scores so that both active and inactive hinge terms occur.
        let theta: Vec<f64> = flatten(&model.store).iter().map(|_| rng.uniform(-1.0, 1.0)).collect();
        unflatten(&mut model.store, &theta);
        let features = t(&[n_items, feature_dim], &rand_vec(&mut rng, n_items * feature_dim, 1.0));
        let batch: Vec<Instance> = (0..size(&mut rng, 1, 3))
            .map(|_| {
                let positive = rng.index(n_items);
                let z = size(&mut rng, 1, n_items - 1);
                let mut negatives: Vec<usize> = (0..n_items).filter(|&i| i != positive).collect();
                rng.shuffle(&mut negatives);
                negatives.truncate(z);
                let inputs = (0..size(&mut rng, 1, 5)).map(|_| rng.index(n_items)).collect();
                Instance {
                    inputs,
                    positive,
                    negatives,
                }
            })
            .collect();
        let f = |th: &[f64]| {
            let mut m = model.clone();
            unflatten(&mut m.store, th);
            wmrb_batch(&mut m, &batch, &features, mode).unwrap()
        };
        let mut m = model.clone();
        m.store.zero_grad();
        wmrb_batch(&mut m, &batch, &features, mode).unwrap();
        errs.push(rel_err(&flatten_grads(&m.store), &numeric_grad(f, &theta)));
    }
    let name = match hidden {
        Some(_) => format!("WMRB ({}, hidden layer)", mode),
        None => format!("WMRB ({})", mode),
    };
    report(&name, errs)
}

pub fn tiny_attr_config() -> AttrModelConfig {
    AttrModelConfig {
        word_embed_dim: 3,
        conv_width: 2,
        conv_filters: 3,
        text_dense_units: 3,
        meta_embed_dim: 2,
        image_fusion_units: 3,
        shared_dense_units: 4,
        learning_rate: 0.1,
        batch_size: 4,
        max_seq_len: 5,
        min_token_count: 1,
    }
}

pub const TINY_SIZES: VocabSizes = VocabSizes {
    words: 7,
    product_types: 2,
    brands: 3,
    divisions: 2,
    shot_dim: 2,
};

pub fn tiny_task(name: &str, classes: usize, types: &[usize], rng: &mut RngState) -> TaskSpec {
    TaskSpec {
        name: name.to_string(),
        label_vocab: (0..classes).map(|c| format!("{}_{}", name, c)).collect(),
        applicable_product_types: types.iter().map(|t| format!("type{}", t)).collect(),
        applicable_type_ids: types.iter().copied().collect::<BTreeSet<_>>(),
        class_weights: (0..classes).map(|_| rng.uniform(0.5, 2.0)).collect(),
    }
}

pub fn random_record(sizes: &VocabSizes, max_seq_len: usize, rng: &mut RngState) -> ProductRecord {
    let n_tokens = rng.index(max_seq_len + 1);
    let mut tokens: Vec<usize> = (0..n_tokens).map(|_| 2 + rng.index(sizes.words - 2)).collect();
    tokens.resize(max_seq_len, 0);
    ProductRecord {
        product_id: format!("p{}", rng.index(1_000_000)),
        product_type_id: rng.index(sizes.product_types),
        brand_id: rng.index(sizes.brands),
        division_id: rng.index(sizes.divisions),
        text_tokens: tokens,
        image_shot_features: (0..NUM_SHOTS).map(|_| rand_vec(rng, sizes.shot_dim, 1.0)).collect(),
        attribute_labels: BTreeMap::new(),
    }
}

/// The whole attribute network (text, image, metadata, fusion and head)
/// under one task's weighted cross-entropy.
pub fn check_attr_model(instances: usize, seed: u64) -> GradReport {
    let mut rng = RngState::new(seed);
    let config = tiny_attr_config();
    let mut errs = Vec::new();
    for _ in 0..instances {
        let tasks = vec![tiny_task("a", 3, &[0, 1], &mut rng), tiny_task("b", 2, &[0, 1], &mut rng)];
        let (model, mut store) = build_attr_model(&config, &tasks, TINY_SIZES, None, &mut rng).unwrap();
        let theta: Vec<f64> = flatten(&store).iter().map(|_| rng.uniform(-0.8, 0.8)).collect();
        unflatten(&mut store, &theta);
        let records: Vec<ProductRecord> = (0..size(&mut rng, 1, 3)).map(|_| random_record(&TINY_SIZES, config.max_seq_len, &mut rng)).collect();
        let refs: Vec<&ProductRecord> = records.iter().collect();
        let task = rng.index(2);
        let labels: Vec<usize> = refs.iter().map(|_| rng.index(tasks[task].num_classes())).collect();
        let f = |th: &[f64]| {
            let mut s = store.clone();
            unflatten(&mut s, th);
            task_loss_and_grad(&model, &mut s, task, &refs, &labels).unwrap()
        };
        let mut s = store.clone();
        s.zero_grad();
        task_loss_and_grad(&model, &mut s, task, &refs, &labels).unwrap();
        errs.push(rel_err(&flatten_grads(&s), &numeric_grad(f, &theta)));
    }
    report("attribute network (all branches)", errs)
}

/// Every gradient check at `instances` instances each.
pub fn gradient_suite(instances: usize) -> Vec<GradReport> {
    vec![
        check_dense(Activation::Identity, instances, 11),
        check_dense(Activation::Relu, instances, 12),
        check_embedding(instances, 13),
        check_conv1d(instances, 14),
        check_max_over_time(instances, 15),
        check_softmax_cross_entropy(instances, 16),
        check_wmrb(Mode::CfOnly, None, instances, 17),
        check_wmrb(Mode::ContentOnly, None, instances, 18),
        check_wmrb(Mode::Hybrid, None, instances, 19),
        check_wmrb(Mode::Hybrid, Some(3), instances, 20),
        check_attr_model(instances, 21),
    ]
}

// Brute-force metric oracles. Each follows the textbook definition directly
// and shares no code with the library.

pub fn oracle_weighted_f1(truth: &[usize], pred: &[usize], classes: usize) -> f64 {
    let n = truth.len() as f64;
    let mut total = 0.0;
    for c in 0..classes {
        let support = truth.iter().filter(|&&t| t == c).count();
        if support == 0 {
            continue;
        }
        let tp = truth.iter().zip(pred).filter(|(&t, &p)| t == c && p == c).count() as f64;
        let predicted = pred.iter().filter(|&&p| p == c).count() as f64;
        let precision = if predicted > 0.0 { tp / predicted } else { 0.0 };
        let recall = tp / support as f64;
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        total += f1 * support as f64 / n;
    }
    total
}

pub fn oracle_accuracy(truth: &[usize], pred: &[usize]) -> f64 {
    let mut hits = 0;
    for i in 0..truth.len() {
        if truth[i] == pred[i] {
            hits += 1;
        }
    }
    hits as f64 / truth.len() as f64
}

pub fn oracle_confusion(truth: &[usize], pred: &[usize], classes: usize) -> Vec<Vec<usize>> {
    (0..classes)
        .map(|a| (0..classes).map(|b| (0..truth.len()).filter(|&i| truth[i] == a && pred[i] == b).count()).collect())
        .collect()
}

pub fn oracle_precision_recall(ranked: &[usize], relevant: &[usize], k: usize) -> (f64, f64) {
    let mut hits = 0;
    for (pos, item) in ranked.iter().enumerate() {
        if pos < k && relevant.contains(item) {
            hits += 1;
        }
    }
    (hits as f64 / k as f64, hits as f64 / relevant.len() as f64)
}

#[derive(Debug, Clone)]
pub struct OracleReport {
    pub name: &'static str,
    pub instances: usize,
    pub worst: f64,
}

/// Library metrics against the oracles on random small instances.
pub fn metric_oracle_suite(instances: usize, seed: u64) -> Vec<OracleReport> {
    let mut rng = RngState::new(seed);
    let mut worst = [0.0f64; 4];
    for _ in 0..instances {
        let classes = size(&mut rng, 1, 6);
        let n = size(&mut rng, 1, 30);
        let truth: Vec<usize> = (0..n).map(|_| rng.index(classes)).collect();
        let pred: Vec<usize> = (0..n).map(|_| rng.index(classes)).collect();
        worst[0] = worst[0].max((metrics::weighted_f1(&truth, &pred, classes).unwrap() - oracle_weighted_f1(&truth, &pred, classes)).abs());
        worst[1] = worst[1].max((metrics::accuracy(&truth, &pred).unwrap() - oracle_accuracy(&truth, &pred)).abs());
        let labels: Vec<String> = (0..classes).map(|c| c.to_string()).collect();
        let cm = metrics::confusion(&truth, &pred, &labels).unwrap();
        if cm.counts != oracle_confusion(&truth, &pred, classes) {
            worst[2] = f64::INFINITY;
        }

        let pool = size(&mut rng, 1, 25);
        let mut ranked: Vec<usize> = (0..pool).collect();
        rng.shuffle(&mut ranked);
        ranked.truncate(size(&mut rng, 0, pool));
        let relevant: Vec<usize> = (0..pool).filter(|_| rng.bernoulli(0.3)).collect();
        let k = size(&mut rng, 1, 12);
        let rel_set: HashSet<usize> = relevant.iter().copied().collect();
        match metrics::precision_recall_at_k(&ranked, &rel_set, k).unwrap() {
            None => {
                if !relevant.is_empty() {
                    worst[3] = f64::INFINITY;
                }
            }
            Some(m) => {
                let (p, r) = oracle_precision_recall(&ranked, &relevant, k);
                worst[3] = worst[3].max((m.precision_at_k - p).abs()).max((m.recall_at_k - r).abs());
            }
        }
    }
    ["weighted_f1", "accuracy", "confusion", "precision_recall_at_k"]
        .iter()
        .zip(worst)
        .map(|(&name, w)| OracleReport {
            name,
            instances,
            worst: w,
        })
        .collect()
}

/// One task-A step on a batch whose products carry no task-B label. Returns
/// (head B bit-identical, head A moved, shared layers moved).
pub fn head_isolation_step(seed: u64) -> (bool, bool, bool) {
    let mut rng = RngState::new(seed);
    let config = tiny_attr_config();
    let tasks = vec![tiny_task("a", 3, &[0, 1], &mut rng), tiny_task("b", 4, &[0, 1], &mut rng)];
    let (model, mut store) = build_attr_model(&config, &tasks, TINY_SIZES, None, &mut rng).unwrap();
    let records: Vec<ProductRecord> = (0..6)
        .map(|i| {
            let mut r = random_record(&TINY_SIZES, config.max_seq_len, &mut rng);
            r.attribute_labels.insert("a".into(), Some(format!("a_{}", i % 3)));
            r.attribute_labels.insert("b".into(), None);
            r
        })
        .collect();
    let refs: Vec<&ProductRecord> = records.iter().collect();
    let labels: Vec<usize> = (0..refs.len()).map(|i| i % 3).collect();
    let before = store.clone();
    store.zero_grad();
    task_loss_and_grad(&model, &mut store, 0, &refs, &labels).unwrap();
    store.sgd_step(0.5).unwrap();

    let bits = |s: &ParameterStore, name: &str| -> Vec<u64> { s.get(name).unwrap().data().iter().map(|v| v.to_bits()).collect() };
    let b_names = [modabric::attr::head_weight("b"), modabric::attr::head_bias("b")];
    let b_same = b_names.iter().all(|n| bits(&before, n) == bits(&store, n));
    let a_moved = bits(&before, &modabric::attr::head_weight("a")) != bits(&store, &modabric::attr::head_weight("a"));
    let shared_moved = store
        .names()
        .filter(|n| n.starts_with(modabric::attr::SHARED_PREFIX))
        .any(|n| bits(&before, n) != bits(&store, n));
    (b_same, a_moved, shared_moved)
}

/// Layer widths small enough for a single core, wide enough for the
/// synthetic signal.
pub fn desk_attr_config() -> AttrModelConfig {
    AttrModelConfig {
        word_embed_dim: 16,
        conv_filters: 32,
        text_dense_units: 32,
        meta_embed_dim: 8,
        image_fusion_units: 32,
        shared_dense_units: 64,
        max_seq_len: 24,
        learning_rate: 0.05,
        batch_size: 64,
        ..Default::default()
    }
}

pub struct MultitaskSetup {
    pub records: Vec<ProductRecord>,
    pub datasets: Vec<modabric::multitask::TaskDataset>,
    pub sizes: VocabSizes,
}

pub fn multitask_setup(spec: &modabric::data::synth::SynthSpec, config: &AttrModelConfig, min_support: usize) -> MultitaskSetup {
    use modabric::data::catalogue::CatalogueVocabs;
    let data = modabric::data::synth::generate_synthetic(spec).unwrap();
    let vocabs = CatalogueVocabs::build(&data.catalogue, config.min_token_count, config.max_seq_len).unwrap();
    let records = vocabs.encode_all(&data.catalogue).unwrap();
    let built = modabric::multitask::build_task_datasets(&records, &vocabs.product_types, &data.taxonomy, min_support, 0.9, spec.seed).unwrap();
    MultitaskSetup {
        records,
        datasets: built.datasets,
        sizes: VocabSizes {
            words: vocabs.words.len(),
            product_types: vocabs.product_types.len(),
            brands: vocabs.brands.len(),
            divisions: vocabs.divisions.len(),
            shot_dim: vocabs.shot_dim,
        },
    }
}

pub fn train_plan(cycles: usize, seed: u64, config: &AttrModelConfig) -> modabric::multitask::TrainPlan {
    modabric::multitask::TrainPlan {
        cycles,
        eval_every: cycles,
        seed,
        learning_rate: config.learning_rate,
        batch_size: config.batch_size,
    }
}

pub fn mean_f1(evals: &[modabric::multitask::TaskEvaluation]) -> f64 {
    evals.iter().map(|e| e.weighted_f1).sum::<f64>() / evals.len() as f64
}

/// Normalised features and the temporal split of a synthetic world.
pub fn rec_world(spec: &modabric::data::synth::SynthSpec) -> (Tensor, modabric::data::interactions::SplitInteractions) {
    use modabric::data::features::features_from_lines;
    use modabric::data::interactions::{temporal_split, Event, InteractionSet};
    let data = modabric::data::synth::generate_synthetic(spec).unwrap();
    let (registry, raw) = features_from_lines(&data.features).unwrap();
    let features = modabric::recsys::normalize_features(&raw.matrix).unwrap();
    let events: Vec<Event> = data
        .events
        .iter()
        .enumerate()
        .map(|(order, e)| Event {
            customer: e.customer,
            item: e.product,
            timestamp: e.timestamp,
            kind: e.kind,
            order,
        })
        .collect();
    let set = InteractionSet::from_events(data.customers.clone(), registry, events);
    let [h, p, t] = spec.windows().unwrap();
    (features, temporal_split(set, h, p, t).unwrap())
}

/// The recommender world used for the model comparison: a catalogue with
/// a cold cohort and customers with 20 to 50 history events.
pub fn comparison_spec(seed: u64) -> modabric::data::synth::SynthSpec {
    let mut spec = modabric::data::synth::SynthSpec {
        seed,
        n_products: 1000,
        n_cold_products: 200,
        n_customers: 8000,
        shot_dim: 16,
        ..Default::default()
    };
    spec.interactions.train_events_min = 20;
    spec.interactions.train_events_max = 50;
    spec
}

pub fn comparison_config(seed: u64) -> modabric::recsys::RecTrainConfig {
    modabric::recsys::RecTrainConfig {
        k: 32,
        z: 50,
        batch_size: 256,
        max_epochs: 20,
        patience: Some(5),
        seed,
        ..Default::default()
    }
}

/// Precision@10 of popularity, cf, content and hybrid, on all items and on
/// the cold subset.
#[derive(Debug, Clone, Copy)]
pub struct Comparison {
    pub all: [f64; 4],
    pub cold: [f64; 4],
}

pub fn run_comparison(seed: u64) -> Comparison {
    use modabric::recsys::{evaluate_ranking, popularity_counts, train_rec, Ranker};
    let (features, split) = rec_world(&comparison_spec(seed));
    let cold: Vec<bool> = split.seen_in_training().iter().map(|s| !s).collect();
    let pop = Ranker::popularity(popularity_counts(split.training_events(), split.set.registry.len()));
    let config = comparison_config(seed);
    let mut rankers = vec![pop.clone()];
    for mode in [Mode::CfOnly, Mode::ContentOnly, Mode::Hybrid] {
        let res = train_rec(&split, &features, &config, mode).unwrap();
        rankers.push(Ranker::from_model(&res.model, &features, mode).unwrap());
    }
    let mut out = Comparison { all: [0.0; 4], cold: [0.0; 4] };
    for (i, r) in rankers.iter().enumerate() {
        out.all[i] = evaluate_ranking(r, &pop, &split, 10, true, None).unwrap().precision;
        out.cold[i] = evaluate_ranking(r, &pop, &split, 10, true, Some(&cold)).unwrap().precision;
    }
    out
}

/// Largest deviation of a nonzero row norm from 1 after normalisation of
/// `n_items` random sparse rows, and the number of nonzero rows.
pub fn normalisation_deviation(n_items: usize, dim: usize, seed: u64) -> (f64, usize) {
    let mut rng = RngState::new(seed);
    let data: Vec<f64> = (0..n_items * dim)
        .map(|_| if rng.bernoulli(0.3) { rng.uniform(-50.0, 50.0) } else { 0.0 })
        .collect();
    let out = modabric::recsys::normalize_features(&t(&[n_items, dim], &data)).unwrap();
    let mut worst = 0.0f64;
    let mut nonzero = 0;
    for i in 0..n_items {
        let row = out.row(i);
        if row.iter().any(|&v| v != 0.0) {
            nonzero += 1;
            worst = worst.max((row.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs());
        }
    }
    (worst, nonzero)
}

/// WMRB on an instance whose scores are all equal, and on one where the
/// positive beats every negative by more than the margin. Returns both
/// losses and z.
pub fn wmrb_spot_losses(z: usize) -> (f64, f64) {
    let n_items = z + 2;
    let config = RecModelConfig {
        k: 3,
        hidden_units: None,
        n_items,
        feature_dim: 1,
    };
    let features = Tensor::zeros(&[n_items, 1]);
    let instance = Instance {
        inputs: vec![0],
        positive: 1,
        negatives: (2..n_items).collect(),
    };
    let mut model = RecModel::new(config, &mut RngState::new(1)).unwrap();
    let zeros = vec![0.0; flatten(&model.store).len()];
    unflatten(&mut model.store, &zeros);
    let equal = modabric::recsys::wmrb_loss(&mut model, &instance, &features, Mode::CfOnly).unwrap();

    // User vector e0, positive 2·e0, negatives −e0: margins of 3.
    let cf = model.store.value_mut(modabric::recsys::CF_EMBEDDINGS).unwrap();
    cf.row_mut(0)[0] = 1.0;
    cf.row_mut(1)[0] = 2.0;
    for i in 2..n_items {
        cf.row_mut(i)[0] = -1.0;
    }
    let separated = modabric::recsys::wmrb_loss(&mut model, &instance, &features, Mode::CfOnly).unwrap();
    (equal, separated)
}
