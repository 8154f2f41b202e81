//! Run configuration: a TOML file with fixed sections, overlaid by
//! `--set section.key=value` flags. Unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use modabric::attr::AttrModelConfig;
use modabric::data::interactions::{parse_timestamp, TimeWindow};
use modabric::multitask::TrainPlan;
use modabric::recsys::RecTrainConfig;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root of every random stream in the run.
    pub seed: u64,
    pub data: DataSection,
    pub attr_model: AttrModelConfig,
    pub attr_train: AttrTrainSection,
    pub rec: RecSection,
    pub windows: WindowSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            data: DataSection::default(),
            attr_model: AttrModelConfig::default(),
            attr_train: AttrTrainSection::default(),
            rec: RecSection::default(),
            windows: WindowSection::default(),
            eval: EvalSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Label values rarer than this are dropped (taxonomy overrides win).
    pub min_support: usize,
    /// Share of products in the attribute training split.
    pub split_fraction: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            min_support: modabric::multitask::DEFAULT_MIN_SUPPORT,
            split_fraction: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttrTrainSection {
    pub cycles: usize,
    pub eval_every: usize,
}

impl Default for AttrTrainSection {
    fn default() -> Self {
        let plan = TrainPlan::default();
        AttrTrainSection {
            cycles: plan.cycles,
            eval_every: plan.eval_every,
        }
    }
}

/// Recommender training settings. Zero disables `gradient_cap`,
/// `hidden_units` and `patience`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecSection {
    pub k: usize,
    pub z: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub inputs_per_customer: usize,
    pub validation_fraction: f64,
    pub learning_rate: f64,
    pub gradient_cap: f64,
    pub hidden_units: usize,
    pub patience: usize,
}

impl Default for RecSection {
    fn default() -> Self {
        let d = RecTrainConfig::default();
        RecSection {
            k: d.k,
            z: d.z,
            batch_size: d.batch_size,
            max_epochs: d.max_epochs,
            inputs_per_customer: d.inputs_per_customer,
            validation_fraction: d.validation_fraction,
            learning_rate: d.learning_rate,
            gradient_cap: d.gradient_cap.unwrap_or(0.0),
            hidden_units: d.hidden_units.unwrap_or(0),
            patience: d.patience.unwrap_or(0),
        }
    }
}

/// Window boundaries as RFC 3339 timestamps or `YYYY-MM-DD` dates (UTC
/// midnight). Intervals are half-open.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WindowSection {
    pub history_start: String,
    pub positive_start: String,
    pub test_start: String,
    pub test_end: String,
}

impl Default for WindowSection {
    fn default() -> Self {
        WindowSection {
            history_start: "2016-03-01".into(),
            positive_start: "2017-02-01".into(),
            test_start: "2017-03-01".into(),
            test_end: "2017-04-01".into(),
        }
    }
}

impl WindowSection {
    pub fn resolve(&self) -> Result<[TimeWindow; 3], CliError> {
        let t = |key: &str, s: &str| {
            let full = if s.len() == 10 { format!("{}T00:00:00Z", s) } else { s.to_string() };
            parse_timestamp(&full).map_err(|_| CliError::Usage(format!("windows.{}: bad timestamp {:?}", key, s)))
        };
        let h = t("history_start", &self.history_start)?;
        let p = t("positive_start", &self.positive_start)?;
        let s = t("test_start", &self.test_start)?;
        let e = t("test_end", &self.test_end)?;
        if !(h < p && p < s && s < e) {
            return Err(CliError::Usage("windows must be increasing: history_start < positive_start < test_start < test_end".into()));
        }
        Ok([
            TimeWindow { start: h, end: p },
            TimeWindow { start: p, end: s },
            TimeWindow { start: s, end: e },
        ])
    }

    pub fn from_windows(w: &[TimeWindow; 3]) -> Self {
        let f = modabric::data::interactions::format_timestamp;
        WindowSection {
            history_start: f(w[0].start),
            positive_start: f(w[1].start),
            test_start: f(w[2].start),
            test_end: f(w[2].end),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Ranking cutoff for evaluation and validation.
    pub k: usize,
    /// Remove each customer's training-window items from the candidates.
    pub exclude_seen: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { k: 10, exclude_seen: true }
    }
}

impl RunConfig {
    /// Reads `path` (if any), applies the overrides and the seed flag, and
    /// validates the sections.
    pub fn resolve(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Self, CliError> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Usage(format!("cannot read config {}: {}", p.display(), e)))?;
                text.parse::<toml::Table>()
                    .map_err(|e| CliError::Usage(format!("config {}: {}", p.display(), e)))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut config: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Usage(format!("config: {}", e.message())))?;
        if let Some(s) = seed {
            config.seed = s;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.attr_model.validate()?;
        self.train_plan().validate()?;
        self.rec_train().validate()?;
        self.windows.resolve()?;
        if !(self.data.split_fraction > 0.0 && self.data.split_fraction < 1.0) {
            return Err(CliError::Usage("data.split_fraction must lie in (0, 1)".into()));
        }
        if self.eval.k == 0 {
            return Err(CliError::Usage("eval.k must be positive".into()));
        }
        if !(self.rec.gradient_cap >= 0.0 && self.rec.gradient_cap.is_finite()) {
            return Err(CliError::Usage("rec.gradient_cap must be non-negative".into()));
        }
        Ok(())
    }

    pub fn train_plan(&self) -> TrainPlan {
        TrainPlan {
            cycles: self.attr_train.cycles,
            eval_every: self.attr_train.eval_every,
            seed: self.seed,
            learning_rate: self.attr_model.learning_rate,
            batch_size: self.attr_model.batch_size,
        }
    }

    pub fn rec_train(&self) -> RecTrainConfig {
        let r = &self.rec;
        let nonzero = |v: usize| (v > 0).then_some(v);
        RecTrainConfig {
            k: r.k,
            z: r.z,
            batch_size: r.batch_size,
            max_epochs: r.max_epochs,
            inputs_per_customer: r.inputs_per_customer,
            validation_fraction: r.validation_fraction,
            learning_rate: r.learning_rate,
            seed: self.seed,
            gradient_cap: (r.gradient_cap > 0.0).then_some(r.gradient_cap),
            hidden_units: nonzero(r.hidden_units),
            patience: nonzero(r.patience),
            eval_k: self.eval.k,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("configuration serialises")
    }
}

/// Sets `section.key` (or a top-level key) in `table`. The value is read as
/// a TOML literal, falling back to a plain string.
fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), CliError> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got {:?}", spec)))?;
    let value = match format!("v = {}", raw.trim()).parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.trim().to_string()),
    };
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(CliError::Usage(format!("--set: bad key {:?}", path)));
    }
    let (last, parents) = keys.split_last().expect("at least one key");
    let mut cur = table;
    for k in parents {
        let entry = cur.entry(k.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Usage(format!("--set: {} is not a section", k)))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
