//! Implicit-feedback interaction logs and the temporal split.

use std::collections::HashMap;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};

use super::catalogue::Rejection;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InteractionKind {
    Save,
    Bag,
    Purchase,
}

impl InteractionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            InteractionKind::Save => "save",
            InteractionKind::Bag => "bag",
            InteractionKind::Purchase => "purchase",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "save" => Some(InteractionKind::Save),
            "bag" => Some(InteractionKind::Bag),
            "purchase" => Some(InteractionKind::Purchase),
            _ => None,
        }
    }
}

/// Parses an ISO-8601 / RFC 3339 timestamp into unix seconds (UTC).
pub fn parse_timestamp(s: &str) -> Result<i64> {
    DateTime::parse_from_rfc3339(s.trim())
        .map(|t| t.with_timezone(&Utc).timestamp())
        .map_err(|e| Error::Config(format!("bad timestamp {:?}: {}", s, e)))
}

pub fn format_timestamp(secs: i64) -> String {
    DateTime::<Utc>::from_timestamp(secs, 0)
        .expect("timestamp in range")
        .to_rfc3339_opts(SecondsFormat::Secs, true)
}

/// Dense product index, serialised as a `product_id -> index` JSON object.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ItemRegistry {
    ids: Vec<String>,
    index: HashMap<String, usize>,
}

impl ItemRegistry {
    pub fn new(ids: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::Duplicate(format!("product {}", id)));
            }
        }
        Ok(ItemRegistry { ids, index })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn index_of(&self, product_id: &str) -> Option<usize> {
        self.index.get(product_id).copied()
    }

    pub fn id(&self, index: usize) -> &str {
        &self.ids[index]
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn to_json(&self) -> Result<String> {
        let map: serde_json::Map<String, serde_json::Value> =
            self.ids.iter().enumerate().map(|(i, id)| (id.clone(), i.into())).collect();
        Ok(serde_json::to_string_pretty(&map)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let map: HashMap<String, usize> = serde_json::from_str(text)?;
        let mut ids = vec![None; map.len()];
        for (id, i) in map {
            let slot = ids.get_mut(i).ok_or_else(|| Error::Checkpoint(format!("registry index {} out of range", i)))?;
            *slot = Some(id);
        }
        let ids = ids
            .into_iter()
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| Error::Checkpoint("registry indices are not dense".into()))?;
        ItemRegistry::new(ids)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Event {
    pub customer: usize,
    pub item: usize,
    pub timestamp: i64,
    pub kind: InteractionKind,
    /// Position in the input file; breaks timestamp ties.
    pub order: usize,
}

#[derive(Debug, Clone)]
pub struct InteractionSet {
    pub customers: Vec<String>,
    pub registry: ItemRegistry,
    /// Sorted by (customer, timestamp, order).
    pub events: Vec<Event>,
}

impl InteractionSet {
    pub fn from_events(customers: Vec<String>, registry: ItemRegistry, mut events: Vec<Event>) -> Self {
        events.sort_by_key(|e| (e.customer, e.timestamp, e.order));
        InteractionSet {
            customers,
            registry,
            events,
        }
    }
}

#[derive(Debug, Deserialize)]
struct CsvRow {
    customer_id: String,
    product_id: String,
    timestamp: String,
    kind: String,
}

/// Reads the interaction CSV against a known item registry. Rows with an
/// unknown product, a bad timestamp or kind are returned as rejections,
/// never dropped silently.
pub fn load_interaction_set(path: &Path, registry: &ItemRegistry) -> Result<(InteractionSet, Vec<Rejection>)> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let expected = ["customer_id", "product_id", "timestamp", "kind"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::Parse {
            path: path.display().to_string(),
            line: 1,
            reason: format!("expected header {}", expected.join(",")),
        });
    }
    let mut customer_index: HashMap<String, usize> = HashMap::new();
    let mut events = Vec::new();
    let mut rejects = Vec::new();
    for (i, row) in reader.deserialize::<CsvRow>().enumerate() {
        let line = i + 2;
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                rejects.push(Rejection { line, reason: e.to_string() });
                continue;
            }
        };
        let Some(item) = registry.index_of(&row.product_id) else {
            rejects.push(Rejection {
                line,
                reason: format!("unknown product {}", row.product_id),
            });
            continue;
        };
        let timestamp = match parse_timestamp(&row.timestamp) {
            Ok(t) => t,
            Err(e) => {
                rejects.push(Rejection { line, reason: e.to_string() });
                continue;
            }
        };
        let Some(kind) = InteractionKind::parse(&row.kind) else {
            rejects.push(Rejection {
                line,
                reason: format!("unknown kind {}", row.kind),
            });
            continue;
        };
        let next = customer_index.len();
        let customer = *customer_index.entry(row.customer_id).or_insert(next);
        events.push(Event {
            customer,
            item,
            timestamp,
            kind,
            order: i,
        });
    }
    let mut customers = vec![String::new(); customer_index.len()];
    for (id, i) in customer_index {
        customers[i] = id;
    }
    Ok((InteractionSet::from_events(customers, registry.clone(), events), rejects))
}

pub struct RawInteraction<'a> {
    pub customer_id: &'a str,
    pub product_id: &'a str,
    pub timestamp: i64,
    pub kind: InteractionKind,
}

pub fn write_interactions<'a>(path: &Path, rows: impl IntoIterator<Item = RawInteraction<'a>>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    w.write_record(["customer_id", "product_id", "timestamp", "kind"])?;
    for r in rows {
        w.write_record([r.customer_id, r.product_id, &format_timestamp(r.timestamp), r.kind.as_str()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Half-open time interval `[start, end)` in unix seconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeWindow {
    pub start: i64,
    pub end: i64,
}

impl TimeWindow {
    pub fn contains(&self, t: i64) -> bool {
        self.start <= t && t < self.end
    }
}

/// Events partitioned into the input history, the positive window at the
/// end of training, and the test window.
#[derive(Debug, Clone)]
pub struct SplitInteractions {
    pub set: InteractionSet,
    pub history: Vec<Event>,
    pub positive: Vec<Event>,
    pub test: Vec<Event>,
    /// Events outside all three windows.
    pub out_of_window: usize,
    /// First and last in-window event time per item, `None` if never seen.
    pub availability: Vec<Option<(i64, i64)>>,
    pub windows: [TimeWindow; 3],
}

impl SplitInteractions {
    /// History and positive-window events, in customer/time order.
    pub fn training_events(&self) -> impl Iterator<Item = &Event> {
        let mut all: Vec<&Event> = self.history.iter().chain(&self.positive).collect();
        all.sort_by_key(|e| (e.customer, e.timestamp, e.order));
        all.into_iter()
    }

    /// Items with at least one training-window event.
    pub fn seen_in_training(&self) -> Vec<bool> {
        let mut seen = vec![false; self.set.registry.len()];
        for e in self.history.iter().chain(&self.positive) {
            seen[e.item] = true;
        }
        seen
    }
}

pub fn temporal_split(
    set: InteractionSet,
    history: TimeWindow,
    positive: TimeWindow,
    test: TimeWindow,
) -> Result<SplitInteractions> {
    for (name, w) in [("history", history), ("positive", positive), ("test", test)] {
        if w.start >= w.end {
            return Err(Error::Config(format!("{} window is empty or reversed", name)));
        }
    }
    if history.end != positive.start || positive.end != test.start {
        return Err(Error::Config("windows must be contiguous and non-overlapping".into()));
    }
    let mut parts: [Vec<Event>; 3] = Default::default();
    let mut out_of_window = 0;
    let mut availability: Vec<Option<(i64, i64)>> = vec![None; set.registry.len()];
    for e in &set.events {
        let slot = if history.contains(e.timestamp) {
            0
        } else if positive.contains(e.timestamp) {
            1
        } else if test.contains(e.timestamp) {
            2
        } else {
            out_of_window += 1;
            continue;
        };
        parts[slot].push(*e);
        let a = availability[e.item].get_or_insert((e.timestamp, e.timestamp));
        a.0 = a.0.min(e.timestamp);
        a.1 = a.1.max(e.timestamp);
    }
    for (name, p) in ["history", "positive", "test"].iter().zip(&parts) {
        if p.is_empty() {
            return Err(Error::Empty(format!("{} window has no events", name)));
        }
    }
    let [h, p, t] = parts;
    Ok(SplitInteractions {
        set,
        history: h,
        positive: p,
        test: t,
        out_of_window,
        availability,
        windows: [history, positive, test],
    })
}

pub fn write_rejections<W: Write>(mut out: W, rejects: &[Rejection]) -> std::io::Result<()> {
    for r in rejects {
        writeln!(out, "line {}: {}", r.line, r.reason)?;
    }
    Ok(())
}
