//! Hybrid recommender: item vectors are the sum of a collaborative embedding
//! row and a content projection of the item's features, user vectors are
//! the mean of their items' vectors, and training minimises the WMRB ranking
//! loss over sampled negatives.

mod model;
mod rank;
mod sampling;
mod train;

pub use model::{
    item_vector, item_vectors, score, user_vector, wmrb_batch, wmrb_batch_capped, wmrb_loss, Instance, RecModel, RecModelConfig, CF_EMBEDDINGS,
    CONTENT_B, CONTENT_HIDDEN_B, CONTENT_HIDDEN_W, CONTENT_W, WMRB_EPSILON,
};
pub use rank::{
    evaluate_ranking, popularity_counts, popularity_ranking, rank_items, recommend, similar_items, RankingReport, Ranker,
    ScoredItem,
};
pub use sampling::{sample_negatives, sample_training_instance, CustomerHistory, NegativePool};
pub use train::{train_rec, EpochRecord, RecTrainConfig, RecTrainResult};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which addends of the hybrid item vector are used.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "hybrid")]
    Hybrid,
    #[serde(rename = "cf")]
    CfOnly,
    #[serde(rename = "content")]
    ContentOnly,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::CfOnly, Mode::ContentOnly, Mode::Hybrid];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Hybrid => "hybrid",
            Mode::CfOnly => "cf",
            Mode::ContentOnly => "content",
        }
    }

    pub fn uses_cf(self) -> bool {
        self != Mode::ContentOnly
    }

    pub fn uses_content(self) -> bool {
        self != Mode::CfOnly
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hybrid" => Ok(Mode::Hybrid),
            "cf" | "cf_only" => Ok(Mode::CfOnly),
            "content" | "content_only" => Ok(Mode::ContentOnly),
            other => Err(Error::Unknown {
                what: "mode",
                name: other.to_string(),
            }),
        }
    }
}

/// Scales every column to unit L2 norm, then every row. All-zero columns
/// and rows stay zero.
pub fn normalize_features(raw: &Tensor) -> Result<Tensor> {
    raw.expect_rank("normalize_features", 2)?;
    raw.check_finite("feature matrix")?;
    let (n, d) = (raw.rows(), raw.cols());
    let mut col_norm = vec![0.0; d];
    for i in 0..n {
        for (c, v) in col_norm.iter_mut().zip(raw.row(i)) {
            *c += v * v;
        }
    }
    for c in col_norm.iter_mut() {
        *c = c.sqrt();
    }
    let mut out = raw.clone();
    for i in 0..n {
        let row = out.row_mut(i);
        for (v, &c) in row.iter_mut().zip(&col_norm) {
            if c > 0.0 {
                *v /= c;
            }
        }
        let norm = crate::tensor::l2_norm(row);
        if norm > 0.0 {
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_item_hand_computation() {
        let out = normalize_features(&Tensor::new(vec![1, 2], vec![3.0, 4.0]).unwrap()).unwrap();
        let h = 1.0 / 2f64.sqrt();
        assert!((out.data()[0] - h).abs() < 1e-15 && (out.data()[1] - h).abs() < 1e-15);
    }

    #[test]
    fn zeros_pass_through() {
        let z = Tensor::zeros(&[3, 4]);
        assert_eq!(normalize_features(&z).unwrap(), z);
    }

    #[test]
    fn non_finite_rejected() {
        let t = Tensor::new(vec![1, 2], vec![f64::NAN, 1.0]).unwrap();
        assert!(normalize_features(&t).is_err());
    }

    #[test]
    fn mode_names() {
        for m in Mode::ALL {
            assert_eq!(m.as_str().parse::<Mode>().unwrap(), m);
        }
        assert!("both".parse::<Mode>().is_err());
    }

    proptest! {
        #[test]
        fn rows_have_unit_or_zero_norm(rows in proptest::collection::vec(proptest::collection::vec(prop_oneof![Just(0.0), -5.0..5.0f64], 6), 1..30)) {
            let t = Tensor::from_rows(&rows, 6).unwrap();
            let out = normalize_features(&t).unwrap();
            for i in 0..out.rows() {
                let n = crate::tensor::l2_norm(out.row(i));
                prop_assert!(n.abs() < 1e-9 || (n - 1.0).abs() < 1e-9);
            }
        }
    }
}
