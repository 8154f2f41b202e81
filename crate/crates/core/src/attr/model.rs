use std::collections::{BTreeMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{AttrModelConfig, InputGroup, ProductRecord, TaskSpec};
use crate::data::catalogue::NUM_SHOTS;
use crate::error::{Error, Result};
use crate::ops::{self, Activation};
use crate::params::{self, ParameterStore};
use crate::rng::RngState;
use crate::tensor::Tensor;

/// Prefix shared by every parameter below the task heads.
pub const SHARED_PREFIX: &str = "shared/";
pub const HEAD_PREFIX: &str = "head/";

const WORD_EMBED: &str = "shared/text/word_embed";
const CONV_W: &str = "shared/text/conv_w";
const CONV_B: &str = "shared/text/conv_b";
const TEXT_W: &str = "shared/text/dense_w";
const TEXT_B: &str = "shared/text/dense_b";
const TYPE_EMBED: &str = "shared/type_embed";
const BRAND_EMBED: &str = "shared/meta/brand_embed";
const DIVISION_EMBED: &str = "shared/meta/division_embed";
const IMAGE_W: &str = "shared/image/dense_w";
const IMAGE_B: &str = "shared/image/dense_b";
const FUSION_W: &str = "shared/fusion/w";
const FUSION_B: &str = "shared/fusion/b";

pub fn head_weight(task: &str) -> String {
    format!("{}{}/w", HEAD_PREFIX, task)
}

pub fn head_bias(task: &str) -> String {
    format!("{}{}/b", HEAD_PREFIX, task)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabSizes {
    pub words: usize,
    pub product_types: usize,
    pub brands: usize,
    pub divisions: usize,
    pub shot_dim: usize,
}

/// Architecture description; the weights live in a [`ParameterStore`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttrModel {
    pub config: AttrModelConfig,
    pub sizes: VocabSizes,
    pub tasks: Vec<TaskSpec>,
    pub dropped: Option<InputGroup>,
}

impl AttrModel {
    pub fn task_index(&self, name: &str) -> Result<usize> {
        self.tasks.iter().position(|t| t.name == name).ok_or_else(|| Error::Unknown {
            what: "task",
            name: name.to_string(),
        })
    }

    fn uses(&self, group: InputGroup) -> bool {
        self.dropped != Some(group)
    }

    fn image_input_width(&self) -> usize {
        NUM_SHOTS * self.sizes.shot_dim + self.config.meta_embed_dim
    }

    fn fusion_widths(&self) -> [usize; 3] {
        let c = &self.config;
        [c.text_dense_units, c.image_fusion_units, 3 * c.meta_embed_dim]
    }

    /// Closed-form scalar parameter count.
    pub fn expected_num_scalars(&self) -> usize {
        let c = &self.config;
        let s = &self.sizes;
        let mut n = 0;
        if self.uses(InputGroup::Text) {
            n += s.words * c.word_embed_dim
                + c.conv_width * c.word_embed_dim * c.conv_filters
                + c.conv_filters
                + c.conv_filters * c.text_dense_units
                + c.text_dense_units;
        }
        n += s.product_types * c.meta_embed_dim;
        if self.uses(InputGroup::Images) {
            n += self.image_input_width() * c.image_fusion_units + c.image_fusion_units;
        }
        if self.uses(InputGroup::Metadata) {
            n += (s.brands + s.divisions) * c.meta_embed_dim;
        }
        let fused: usize = self.fusion_widths().iter().sum();
        n += fused * c.shared_dense_units + c.shared_dense_units;
        n += self
            .tasks
            .iter()
            .map(|t| c.shared_dense_units * t.num_classes() + t.num_classes())
            .sum::<usize>();
        n
    }
}

/// Creates the architecture and initialises its parameters. Parameters of
/// a `dropped` input group are not created.
pub fn build_attr_model(
    config: &AttrModelConfig,
    tasks: &[TaskSpec],
    sizes: VocabSizes,
    dropped: Option<InputGroup>,
    rng: &mut RngState,
) -> Result<(AttrModel, ParameterStore)> {
    config.validate()?;
    if tasks.is_empty() {
        return Err(Error::Empty("attribute model needs at least one task".into()));
    }
    let mut seen = HashSet::new();
    for t in tasks {
        if !seen.insert(t.name.as_str()) {
            return Err(Error::Duplicate(format!("task {}", t.name)));
        }
        if t.num_classes() < 2 || t.class_weights.len() != t.num_classes() {
            return Err(Error::Config(format!(
                "task {} needs at least two classes and one weight per class",
                t.name
            )));
        }
    }
    let model = AttrModel {
        config: config.clone(),
        sizes,
        tasks: tasks.to_vec(),
        dropped,
    };
    let c = config;
    let mut store = ParameterStore::new();
    let emb = params::EMBEDDING_INIT_BOUND;

    if model.uses(InputGroup::Text) {
        store.insert(WORD_EMBED, params::uniform(&[sizes.words, c.word_embed_dim], emb, rng))?;
        let fan_in = c.conv_width * c.word_embed_dim;
        store.insert(
            CONV_W,
            params::glorot_uniform(&[c.conv_width, c.word_embed_dim, c.conv_filters], fan_in, c.conv_filters, rng),
        )?;
        store.insert(CONV_B, Tensor::zeros(&[c.conv_filters]))?;
        store.insert(
            TEXT_W,
            params::glorot_uniform(&[c.conv_filters, c.text_dense_units], c.conv_filters, c.text_dense_units, rng),
        )?;
        store.insert(TEXT_B, Tensor::zeros(&[c.text_dense_units]))?;
    }
    store.insert(TYPE_EMBED, params::uniform(&[sizes.product_types, c.meta_embed_dim], emb, rng))?;
    if model.uses(InputGroup::Images) {
        let w = model.image_input_width();
        store.insert(IMAGE_W, params::glorot_uniform(&[w, c.image_fusion_units], w, c.image_fusion_units, rng))?;
        store.insert(IMAGE_B, Tensor::zeros(&[c.image_fusion_units]))?;
    }
    if model.uses(InputGroup::Metadata) {
        store.insert(BRAND_EMBED, params::uniform(&[sizes.brands, c.meta_embed_dim], emb, rng))?;
        store.insert(DIVISION_EMBED, params::uniform(&[sizes.divisions, c.meta_embed_dim], emb, rng))?;
    }
    let fused: usize = model.fusion_widths().iter().sum();
    store.insert(
        FUSION_W,
        params::glorot_uniform(&[fused, c.shared_dense_units], fused, c.shared_dense_units, rng),
    )?;
    store.insert(FUSION_B, Tensor::zeros(&[c.shared_dense_units]))?;
    for t in tasks {
        let k = t.num_classes();
        store.insert(
            head_weight(&t.name),
            params::glorot_uniform(&[c.shared_dense_units, k], c.shared_dense_units, k, rng),
        )?;
        store.insert(head_bias(&t.name), Tensor::zeros(&[k]))?;
    }
    Ok((model, store))
}

struct TextSample {
    embedded: Tensor,
    conv_out: Tensor,
    argmax: Vec<usize>,
    pooled: Tensor,
}

fn text_sample(store: &ParameterStore, tokens: &[usize]) -> Result<TextSample> {
    let embedded = ops::embedding_lookup(store.get(WORD_EMBED)?, tokens)?;
    let conv_out = ops::conv1d_forward(&embedded, store.get(CONV_W)?, store.get(CONV_B)?)?;
    let (pooled, argmax) = ops::max_over_time(&conv_out)?;
    Ok(TextSample {
        embedded,
        conv_out,
        argmax,
        pooled,
    })
}

/// Word embeddings → convolution + relu → max-over-time → dense + relu.
pub fn encode_text(store: &ParameterStore, tokens: &[usize]) -> Result<Tensor> {
    let s = text_sample(store, tokens)?;
    let pooled = Tensor::new(vec![1, s.pooled.len()], s.pooled.into_data())?;
    let out = ops::dense_forward(&pooled, store.get(TEXT_W)?, store.get(TEXT_B)?, Activation::Relu)?;
    Ok(Tensor::vector(out.into_data()))
}

fn image_input_row(store: &ParameterStore, shots: &[Vec<f64>], product_type_id: usize) -> Result<Vec<f64>> {
    if shots.len() != NUM_SHOTS {
        return Err(Error::dim(
            "encode_images",
            format!("expected {} shots, got {}", NUM_SHOTS, shots.len()),
        ));
    }
    let type_row = ops::embedding_lookup(store.get(TYPE_EMBED)?, &[product_type_id])?;
    let mut row: Vec<f64> = shots.iter().flatten().copied().collect();
    row.extend_from_slice(type_row.data());
    Ok(row)
}

/// Concatenated shot features and product-type embedding → dense + relu.
pub fn encode_images(store: &ParameterStore, shots: &[Vec<f64>], product_type_id: usize) -> Result<Tensor> {
    let row = image_input_row(store, shots, product_type_id)?;
    let x = Tensor::new(vec![1, row.len()], row)?;
    let out = ops::dense_forward(&x, store.get(IMAGE_W)?, store.get(IMAGE_B)?, Activation::Relu)?;
    Ok(Tensor::vector(out.into_data()))
}

/// Product-type, brand and division embeddings, concatenated in that order.
pub fn encode_metadata(store: &ParameterStore, product_type_id: usize, brand_id: usize, division_id: usize) -> Result<Tensor> {
    let mut v = ops::embedding_lookup(store.get(TYPE_EMBED)?, &[product_type_id])?.into_data();
    v.extend(ops::embedding_lookup(store.get(BRAND_EMBED)?, &[brand_id])?.into_data());
    v.extend(ops::embedding_lookup(store.get(DIVISION_EMBED)?, &[division_id])?.into_data());
    Ok(Tensor::vector(v))
}

struct TextBatch {
    samples: Vec<TextSample>,
    pooled: Tensor,
    out: Tensor,
}

struct ImageBatch {
    input: Tensor,
    out: Tensor,
}

struct BatchForward {
    text: Option<TextBatch>,
    image: Option<ImageBatch>,
    fusion_in: Tensor,
    shared: Tensor,
}

fn forward_shared(model: &AttrModel, store: &ParameterStore, records: &[&ProductRecord]) -> Result<BatchForward> {
    let b = records.len();
    let c = &model.config;

    let text = if model.uses(InputGroup::Text) {
        let samples = records
            .par_iter()
            .map(|r| text_sample(store, &r.text_tokens))
            .collect::<Result<Vec<_>>>()?;
        let mut pooled = Tensor::zeros(&[b, c.conv_filters]);
        for (i, s) in samples.iter().enumerate() {
            pooled.row_mut(i).copy_from_slice(s.pooled.data());
        }
        let out = ops::dense_forward(&pooled, store.get(TEXT_W)?, store.get(TEXT_B)?, Activation::Relu)?;
        Some(TextBatch { samples, pooled, out })
    } else {
        None
    };

    let image = if model.uses(InputGroup::Images) {
        let mut input = Tensor::zeros(&[b, model.image_input_width()]);
        for (i, r) in records.iter().enumerate() {
            let row = image_input_row(store, &r.image_shot_features, r.product_type_id)?;
            if row.len() != input.cols() {
                return Err(Error::dim("encode_images", "shot dimensionality differs from the model"));
            }
            input.row_mut(i).copy_from_slice(&row);
        }
        let out = ops::dense_forward(&input, store.get(IMAGE_W)?, store.get(IMAGE_B)?, Activation::Relu)?;
        Some(ImageBatch { input, out })
    } else {
        None
    };

    let meta_w = 3 * c.meta_embed_dim;
    let mut meta = Tensor::zeros(&[b, meta_w]);
    if model.uses(InputGroup::Metadata) {
        for (i, r) in records.iter().enumerate() {
            let m = encode_metadata(store, r.product_type_id, r.brand_id, r.division_id)?;
            meta.row_mut(i).copy_from_slice(m.data());
        }
    }

    let zeros_text;
    let text_out = match &text {
        Some(t) => &t.out,
        None => {
            zeros_text = Tensor::zeros(&[b, c.text_dense_units]);
            &zeros_text
        }
    };
    let zeros_image;
    let image_out = match &image {
        Some(t) => &t.out,
        None => {
            zeros_image = Tensor::zeros(&[b, c.image_fusion_units]);
            &zeros_image
        }
    };
    let fusion_in = Tensor::concat_cols(&[text_out, image_out, &meta])?;
    let shared = ops::dense_forward(&fusion_in, store.get(FUSION_W)?, store.get(FUSION_B)?, Activation::Relu)?;
    Ok(BatchForward {
        text,
        image,
        fusion_in,
        shared,
    })
}

fn backward_shared(
    model: &AttrModel,
    store: &mut ParameterStore,
    records: &[&ProductRecord],
    fwd: &BatchForward,
    grad_shared: &Tensor,
) -> Result<()> {
    let fusion = ops::dense_backward(
        &fwd.fusion_in,
        store.get(FUSION_W)?,
        &fwd.shared,
        Activation::Relu,
        grad_shared,
    )?;
    store.accumulate(FUSION_W, &fusion.w)?;
    store.accumulate(FUSION_B, &fusion.b)?;
    let parts = fusion.x.split_cols(&model.fusion_widths())?;
    let (g_text, g_image, g_meta) = (&parts[0], &parts[1], &parts[2]);
    let m = model.config.meta_embed_dim;

    if let Some(text) = &fwd.text {
        let dense = ops::dense_backward(&text.pooled, store.get(TEXT_W)?, &text.out, Activation::Relu, g_text)?;
        store.accumulate(TEXT_W, &dense.w)?;
        store.accumulate(TEXT_B, &dense.b)?;
        let filters = store.get(CONV_W)?;
        let per_sample = text
            .samples
            .par_iter()
            .enumerate()
            .map(|(i, s)| {
                let g_conv = ops::max_over_time_backward(s.conv_out.rows(), &s.argmax, dense.x.row(i))?;
                ops::conv1d_backward(&s.embedded, filters, &s.conv_out, &g_conv)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut g_filters = Tensor::zeros(store.get(CONV_W)?.shape());
        let mut g_bias = Tensor::zeros(store.get(CONV_B)?.shape());
        for (r, g) in records.iter().zip(&per_sample) {
            for (a, v) in g_filters.data_mut().iter_mut().zip(g.filters.data()) {
                *a += v;
            }
            for (a, v) in g_bias.data_mut().iter_mut().zip(g.bias.data()) {
                *a += v;
            }
            for (pos, &tok) in r.text_tokens.iter().enumerate() {
                let row = g.seq.row(pos);
                if row.iter().any(|&v| v != 0.0) {
                    store.accumulate_row(WORD_EMBED, tok, row)?;
                }
            }
        }
        store.accumulate(CONV_W, &g_filters)?;
        store.accumulate(CONV_B, &g_bias)?;
    }

    if let Some(image) = &fwd.image {
        let dense = ops::dense_backward(&image.input, store.get(IMAGE_W)?, &image.out, Activation::Relu, g_image)?;
        store.accumulate(IMAGE_W, &dense.w)?;
        store.accumulate(IMAGE_B, &dense.b)?;
        let type_off = NUM_SHOTS * model.sizes.shot_dim;
        for (i, r) in records.iter().enumerate() {
            store.accumulate_row(TYPE_EMBED, r.product_type_id, &dense.x.row(i)[type_off..type_off + m])?;
        }
    }

    if model.uses(InputGroup::Metadata) {
        for (i, r) in records.iter().enumerate() {
            let g = g_meta.row(i);
            store.accumulate_row(TYPE_EMBED, r.product_type_id, &g[..m])?;
            store.accumulate_row(BRAND_EMBED, r.brand_id, &g[m..2 * m])?;
            store.accumulate_row(DIVISION_EMBED, r.division_id, &g[2 * m..])?;
        }
    }
    Ok(())
}

/// Fused representation of a single product.
pub fn shared_representation(model: &AttrModel, store: &ParameterStore, record: &ProductRecord) -> Result<Tensor> {
    let fwd = forward_shared(model, store, &[record])?;
    Ok(Tensor::vector(fwd.shared.into_data()))
}

fn head_logits(store: &ParameterStore, task: &TaskSpec, shared: &Tensor) -> Result<Tensor> {
    ops::dense_forward(
        shared,
        store.get(&head_weight(&task.name))?,
        store.get(&head_bias(&task.name))?,
        Activation::Identity,
    )
}

/// Mean class-weighted cross-entropy of one task on a batch; gradients are
/// accumulated into `store` (shared layers and this task's head only).
pub fn task_loss_and_grad(
    model: &AttrModel,
    store: &mut ParameterStore,
    task_index: usize,
    records: &[&ProductRecord],
    labels: &[usize],
) -> Result<f64> {
    let task = &model.tasks[task_index];
    let fwd = forward_shared(model, store, records)?;
    let logits = head_logits(store, task, &fwd.shared)?;
    let weights = Tensor::vector(task.class_weights.clone());
    let (loss, g_logits) = ops::softmax_cross_entropy(&logits, labels, &weights)?;
    let (hw, hb) = (head_weight(&task.name), head_bias(&task.name));
    let head = ops::dense_backward(&fwd.shared, store.get(&hw)?, &logits, Activation::Identity, &g_logits)?;
    store.accumulate(&hw, &head.w)?;
    store.accumulate(&hb, &head.b)?;
    backward_shared(model, store, records, &fwd, &head.x)?;
    Ok(loss)
}

const INFERENCE_CHUNK: usize = 256;

/// Shared representations of many records, one row per record.
pub fn shared_representations(model: &AttrModel, store: &ParameterStore, records: &[&ProductRecord]) -> Result<Tensor> {
    let width = model.config.shared_dense_units;
    let mut data = Vec::with_capacity(records.len() * width);
    for chunk in records.chunks(INFERENCE_CHUNK) {
        data.extend(forward_shared(model, store, chunk)?.shared.into_data());
    }
    Tensor::new(vec![records.len(), width], data)
}

/// Class probabilities of one task given precomputed shared representations.
/// Applicability is not checked here.
pub fn head_probabilities(store: &ParameterStore, task: &TaskSpec, shared: &Tensor) -> Result<Vec<Vec<f64>>> {
    let logits = head_logits(store, task, shared)?;
    Ok((0..logits.rows()).map(|r| ops::softmax(logits.row(r))).collect())
}

/// Probability distribution over the task's label vocabulary.
pub fn predict_attribute(
    model: &AttrModel,
    store: &ParameterStore,
    record: &ProductRecord,
    task_name: &str,
) -> Result<Vec<f64>> {
    let ti = model.task_index(task_name)?;
    if !model.tasks[ti].applies_to(record.product_type_id) {
        return Err(Error::NotApplicable {
            task: task_name.to_string(),
            product_type: record.product_type_id.to_string(),
        });
    }
    let shared = shared_representations(model, store, &[record])?;
    Ok(head_probabilities(store, &model.tasks[ti], &shared)?.remove(0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: String,
    pub probability: f64,
}

/// Most likely label for every task that applies to the record's product type.
pub fn predict_all(model: &AttrModel, store: &ParameterStore, record: &ProductRecord) -> Result<BTreeMap<String, Prediction>> {
    let fwd = forward_shared(model, store, &[record])?;
    let mut out = BTreeMap::new();
    for task in model.tasks.iter().filter(|t| t.applies_to(record.product_type_id)) {
        let logits = head_logits(store, task, &fwd.shared)?;
        let p = ops::softmax(logits.row(0));
        let (best, prob) = argmax(&p);
        out.insert(
            task.name.clone(),
            Prediction {
                label: task.label_vocab[best].clone(),
                probability: prob,
            },
        );
    }
    Ok(out)
}

/// Index and value of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> (usize, f64) {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    (best, v[best])
}
