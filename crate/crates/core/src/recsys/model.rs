use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::Mode;
use crate::error::{Error, Result};
use crate::ops::{self, Activation};
use crate::params::{self, ParameterStore};
use crate::rng::RngState;
use crate::tensor::{dot, Tensor};

pub const CF_EMBEDDINGS: &str = "cf/embeddings";
pub const CONTENT_W: &str = "content/w";
pub const CONTENT_B: &str = "content/b";
pub const CONTENT_HIDDEN_W: &str = "content/hidden_w";
pub const CONTENT_HIDDEN_B: &str = "content/hidden_b";

/// Keeps the loss finite when every hinge term is zero.
pub const WMRB_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecModelConfig {
    pub k: usize,
    /// Optional relu layer between the features and the `k`-dim projection.
    pub hidden_units: Option<usize>,
    pub n_items: usize,
    pub feature_dim: usize,
}

/// Collaborative embedding table plus the content network. Both parts
/// always exist; the mode decides which of them contribute.
#[derive(Debug, Clone)]
pub struct RecModel {
    pub config: RecModelConfig,
    pub store: ParameterStore,
}

impl RecModel {
    /// Embedding rows uniform in ±0.05, dense layers scaled-uniform, zero biases.
    pub fn new(config: RecModelConfig, rng: &mut RngState) -> Result<Self> {
        let RecModelConfig {
            k,
            hidden_units,
            n_items,
            feature_dim,
        } = config;
        if k == 0 || n_items == 0 || feature_dim == 0 || hidden_units == Some(0) {
            return Err(Error::Config("k, n_items, feature_dim and hidden_units must be positive".into()));
        }
        let mut store = ParameterStore::new();
        store.insert(CF_EMBEDDINGS, params::uniform(&[n_items, k], params::EMBEDDING_INIT_BOUND, rng))?;
        let proj_in = match hidden_units {
            Some(h) => {
                store.insert(CONTENT_HIDDEN_W, params::glorot_uniform(&[feature_dim, h], feature_dim, h, rng))?;
                store.insert(CONTENT_HIDDEN_B, Tensor::zeros(&[h]))?;
                h
            }
            None => feature_dim,
        };
        store.insert(CONTENT_W, params::glorot_uniform(&[proj_in, k], proj_in, k, rng))?;
        store.insert(CONTENT_B, Tensor::zeros(&[k]))?;
        Ok(RecModel { config, store })
    }

    /// Wraps a loaded store after checking every expected parameter shape.
    pub fn from_store(config: RecModelConfig, store: ParameterStore) -> Result<Self> {
        let mut expected = vec![(CF_EMBEDDINGS, vec![config.n_items, config.k])];
        let proj_in = match config.hidden_units {
            Some(h) => {
                expected.push((CONTENT_HIDDEN_W, vec![config.feature_dim, h]));
                expected.push((CONTENT_HIDDEN_B, vec![h]));
                h
            }
            None => config.feature_dim,
        };
        expected.push((CONTENT_W, vec![proj_in, config.k]));
        expected.push((CONTENT_B, vec![config.k]));
        for (name, shape) in &expected {
            store.get(name)?.expect_shape("checkpoint", shape)?;
        }
        if store.len() != expected.len() {
            return Err(Error::Checkpoint("unexpected parameters in recommender checkpoint".into()));
        }
        Ok(RecModel { config, store })
    }

    fn check_item(&self, item: usize) -> Result<()> {
        if item >= self.config.n_items {
            return Err(Error::Index {
                what: "item",
                index: item,
                size: self.config.n_items,
            });
        }
        Ok(())
    }
}

struct ContentForward {
    x: Tensor,
    hidden: Option<Tensor>,
    out: Tensor,
}

fn content_forward(model: &RecModel, features: &Tensor, items: &[usize]) -> Result<ContentForward> {
    features.expect_shape("content", &[model.config.n_items, model.config.feature_dim])?;
    let x = ops::embedding_lookup(features, items)?;
    let s = &model.store;
    let hidden = match model.config.hidden_units {
        Some(_) => Some(ops::dense_forward(&x, s.get(CONTENT_HIDDEN_W)?, s.get(CONTENT_HIDDEN_B)?, Activation::Relu)?),
        None => None,
    };
    let out = ops::dense_forward(hidden.as_ref().unwrap_or(&x), s.get(CONTENT_W)?, s.get(CONTENT_B)?, Activation::Identity)?;
    Ok(ContentForward { x, hidden, out })
}

fn content_backward(model: &mut RecModel, fwd: &ContentForward, upstream: &Tensor) -> Result<()> {
    let s = &mut model.store;
    let input = fwd.hidden.as_ref().unwrap_or(&fwd.x);
    let g = ops::dense_backward(input, s.get(CONTENT_W)?, &fwd.out, Activation::Identity, upstream)?;
    s.accumulate(CONTENT_W, &g.w)?;
    s.accumulate(CONTENT_B, &g.b)?;
    if let Some(hidden) = &fwd.hidden {
        let gh = ops::dense_backward(&fwd.x, s.get(CONTENT_HIDDEN_W)?, hidden, Activation::Relu, &g.x)?;
        s.accumulate(CONTENT_HIDDEN_W, &gh.w)?;
        s.accumulate(CONTENT_HIDDEN_B, &gh.b)?;
    }
    Ok(())
}

/// Item vectors for `items`, one row each.
pub fn item_vectors(model: &RecModel, features: &Tensor, items: &[usize], mode: Mode) -> Result<Tensor> {
    for &i in items {
        model.check_item(i)?;
    }
    let k = model.config.k;
    let mut out = Tensor::zeros(&[items.len(), k]);
    if mode.uses_content() {
        out = content_forward(model, features, items)?.out;
    }
    if mode.uses_cf() {
        let cf = model.store.get(CF_EMBEDDINGS)?;
        for (r, &i) in items.iter().enumerate() {
            for (o, v) in out.row_mut(r).iter_mut().zip(cf.row(i)) {
                *o += v;
            }
        }
    }
    Ok(out)
}

/// `cf[item] + content(features[item])`, or one of the two addends.
pub fn item_vector(model: &RecModel, item: usize, features: &Tensor, mode: Mode) -> Result<Tensor> {
    Ok(Tensor::vector(item_vectors(model, features, &[item], mode)?.into_data()))
}

/// Mean item vector over the interacted items, duplicates included.
pub fn user_vector(model: &RecModel, items: &[usize], features: &Tensor, mode: Mode) -> Result<Tensor> {
    if items.is_empty() {
        return Err(Error::Empty("cold user: no interacted items".into()));
    }
    let vecs = item_vectors(model, features, items, mode)?;
    Ok(Tensor::vector(mean_rows(&vecs, 0..vecs.rows())))
}

fn mean_rows(t: &Tensor, rows: impl Iterator<Item = usize>) -> Vec<f64> {
    let mut acc = vec![0.0; t.cols()];
    let mut n = 0;
    for r in rows {
        for (a, v) in acc.iter_mut().zip(t.row(r)) {
            *a += v;
        }
        n += 1;
    }
    acc.iter().map(|a| a / n as f64).collect()
}

pub fn score(model: &RecModel, user: &Tensor, item: usize, features: &Tensor, mode: Mode) -> Result<f64> {
    let v = item_vector(model, item, features, mode)?;
    if v.len() != user.len() {
        return Err(Error::dim("score", format!("user vector has {} entries, k = {}", user.len(), v.len())));
    }
    Ok(dot(user.data(), v.data()))
}

/// One WMRB training instance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instance {
    pub inputs: Vec<usize>,
    pub positive: usize,
    pub negatives: Vec<usize>,
}

/// Loss of one instance: `log(ε + Σ_j max(0, 1 − s_ui + s_uj))`. Gradients
/// are accumulated into the model's store.
pub fn wmrb_loss(model: &mut RecModel, instance: &Instance, features: &Tensor, mode: Mode) -> Result<f64> {
    wmrb_batch(model, std::slice::from_ref(instance), features, mode)
}

/// Mean WMRB loss over a batch. Item vectors are computed once per distinct
/// item; gradients reach the cf rows and content layers of exactly the items
/// that appear in the batch.
pub fn wmrb_batch(model: &mut RecModel, batch: &[Instance], features: &Tensor, mode: Mode) -> Result<f64> {
    wmrb_batch_capped(model, batch, features, mode, None)
}

/// `wmrb_batch` with the per-instance factor `1/(ε+S)` of the gradient
/// limited to `cap`. Near a perfect ranking the exact factor grows without
/// bound and a single instance can throw the parameters far off. The
/// returned loss is unaffected.
pub fn wmrb_batch_capped(
    model: &mut RecModel,
    batch: &[Instance],
    features: &Tensor,
    mode: Mode,
    cap: Option<f64>,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Empty("empty WMRB batch".into()));
    }
    let mut slot: BTreeMap<usize, usize> = BTreeMap::new();
    for inst in batch {
        if inst.inputs.is_empty() {
            return Err(Error::Sampling("instance without input items".into()));
        }
        if inst.negatives.contains(&inst.positive) {
            return Err(Error::Sampling(format!("positive item {} drawn as a negative", inst.positive)));
        }
        for &i in inst.inputs.iter().chain([&inst.positive]).chain(&inst.negatives) {
            let next = slot.len();
            slot.entry(i).or_insert(next);
        }
    }
    let mut items = vec![0; slot.len()];
    for (&item, &s) in &slot {
        items[s] = item;
    }
    for &i in &items {
        model.check_item(i)?;
    }
    let content = if mode.uses_content() {
        Some(content_forward(model, features, &items)?)
    } else {
        None
    };
    let k = model.config.k;
    let mut vecs = match &content {
        Some(c) => c.out.clone(),
        None => Tensor::zeros(&[items.len(), k]),
    };
    if mode.uses_cf() {
        let cf = model.store.get(CF_EMBEDDINGS)?;
        for (r, &i) in items.iter().enumerate() {
            for (o, v) in vecs.row_mut(r).iter_mut().zip(cf.row(i)) {
                *o += v;
            }
        }
    }

    let scale = 1.0 / batch.len() as f64;
    let mut grad = Tensor::zeros(&[items.len(), k]);
    let mut total = 0.0;
    for inst in batch {
        let inputs: Vec<usize> = inst.inputs.iter().map(|i| slot[i]).collect();
        let vu = mean_rows(&vecs, inputs.iter().copied());
        let p = slot[&inst.positive];
        let s_pos = dot(&vu, vecs.row(p));
        let mut sum = 0.0;
        let mut active = Vec::new();
        for j in &inst.negatives {
            let h = 1.0 - s_pos + dot(&vu, vecs.row(slot[j]));
            if h > 0.0 {
                sum += h;
                active.push(slot[j]);
            }
        }
        total += (WMRB_EPSILON + sum).ln();
        if active.is_empty() {
            continue;
        }
        // dL/ds_j = 1/(ε+S) for active j, dL/ds_i = −|active|/(ε+S).
        let inv = 1.0 / (WMRB_EPSILON + sum);
        let g = scale * cap.map_or(inv, |c| inv.min(c));
        let g_pos = -(active.len() as f64) * g;
        let mut g_vu = vec![0.0; k];
        for (a, v) in g_vu.iter_mut().zip(vecs.row(p)) {
            *a += g_pos * v;
        }
        for (a, v) in grad.row_mut(p).iter_mut().zip(&vu) {
            *a += g_pos * v;
        }
        for &j in &active {
            for (a, v) in g_vu.iter_mut().zip(vecs.row(j)) {
                *a += g * v;
            }
            for (a, v) in grad.row_mut(j).iter_mut().zip(&vu) {
                *a += g * v;
            }
        }
        let share = 1.0 / inputs.len() as f64;
        for &m in &inputs {
            for (a, v) in grad.row_mut(m).iter_mut().zip(&g_vu) {
                *a += share * v;
            }
        }
    }

    if mode.uses_cf() {
        for (r, &i) in items.iter().enumerate() {
            model.store.accumulate_row(CF_EMBEDDINGS, i, grad.row(r))?;
        }
    }
    if let Some(c) = &content {
        content_backward(model, c, &grad)?;
    }
    Ok(total * scale)
}
