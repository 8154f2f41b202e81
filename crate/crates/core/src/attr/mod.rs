//! Multi-modal, multi-task product attribute network.
//!
//! Text (word embeddings → 1-D convolution → max-over-time pooling → dense),
//! image shots (four precomputed feature vectors merged with a product-type
//! embedding → dense) and metadata (type, brand and division embeddings) are
//! concatenated and fused by a shared dense layer. Every attribute owns one
//! softmax head on top of the shared representation; all layers below the
//! heads are shared by every task.

mod model;

pub use model::{
    argmax, build_attr_model, head_bias, head_probabilities, head_weight, encode_images, encode_metadata, encode_text, predict_all, predict_attribute,
    shared_representation, shared_representations, task_loss_and_grad, AttrModel, Prediction, VocabSizes, HEAD_PREFIX,
    SHARED_PREFIX,
};

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use crate::data::catalogue::ProductRecord;
use crate::error::{Error, Result};

/// One attribute prediction task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub label_vocab: Vec<String>,
    pub applicable_product_types: Vec<String>,
    /// Product-type vocabulary ids matching `applicable_product_types`.
    pub applicable_type_ids: BTreeSet<usize>,
    pub class_weights: Vec<f64>,
}

impl TaskSpec {
    pub fn num_classes(&self) -> usize {
        self.label_vocab.len()
    }

    pub fn applies_to(&self, product_type_id: usize) -> bool {
        self.applicable_type_ids.contains(&product_type_id)
    }

    pub fn label_id(&self, label: &str) -> Option<usize> {
        self.label_vocab.iter().position(|l| l == label)
    }
}

/// Inverse-frequency class weights `N / (C·n_c)`, clipped to `[0.1, 10]`.
pub fn inverse_frequency_weights(counts: &[usize]) -> Vec<f64> {
    let n: usize = counts.iter().sum();
    let c = counts.len() as f64;
    counts
        .iter()
        .map(|&k| {
            if k == 0 {
                10.0
            } else {
                (n as f64 / (c * k as f64)).clamp(0.1, 10.0)
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttrModelConfig {
    pub word_embed_dim: usize,
    pub conv_width: usize,
    pub conv_filters: usize,
    pub text_dense_units: usize,
    pub meta_embed_dim: usize,
    pub image_fusion_units: usize,
    pub shared_dense_units: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_seq_len: usize,
    pub min_token_count: usize,
}

impl Default for AttrModelConfig {
    fn default() -> Self {
        AttrModelConfig {
            word_embed_dim: 64,
            conv_width: 3,
            conv_filters: 128,
            text_dense_units: 128,
            meta_embed_dim: 16,
            image_fusion_units: 128,
            shared_dense_units: 256,
            learning_rate: 0.01,
            batch_size: 64,
            max_seq_len: 64,
            min_token_count: 1,
        }
    }
}

impl AttrModelConfig {
    pub fn validate(&self) -> Result<()> {
        let ints = [
            ("word_embed_dim", self.word_embed_dim),
            ("conv_width", self.conv_width),
            ("conv_filters", self.conv_filters),
            ("text_dense_units", self.text_dense_units),
            ("meta_embed_dim", self.meta_embed_dim),
            ("image_fusion_units", self.image_fusion_units),
            ("shared_dense_units", self.shared_dense_units),
            ("batch_size", self.batch_size),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in ints {
            if v == 0 {
                return Err(Error::Config(format!("{} must be positive", name)));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.max_seq_len < self.conv_width {
            return Err(Error::Config("max_seq_len must be at least conv_width".into()));
        }
        Ok(())
    }
}

/// An input branch of the network that can be removed for ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputGroup {
    Text,
    Images,
    Metadata,
}

impl InputGroup {
    pub const ALL: [InputGroup; 3] = [InputGroup::Text, InputGroup::Images, InputGroup::Metadata];

    pub fn as_str(self) -> &'static str {
        match self {
            InputGroup::Text => "text",
            InputGroup::Images => "images",
            InputGroup::Metadata => "metadata",
        }
    }
}

impl fmt::Display for InputGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for InputGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(InputGroup::Text),
            "images" => Ok(InputGroup::Images),
            "metadata" => Ok(InputGroup::Metadata),
            other => Err(Error::Unknown {
                what: "input group",
                name: other.to_string(),
            }),
        }
    }
}
