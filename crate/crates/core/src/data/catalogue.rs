//! Catalogue ingestion (JSON lines) and the task taxonomy file.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::vocab::{CategoryVocab, Vocabulary};
use crate::error::{Error, Result};

/// Number of product shots per catalogue item.
pub const NUM_SHOTS: usize = 4;

/// One line of the catalogue file. A `null` attribute is an absent label;
/// attributes that do not apply to the product are simply omitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CatalogueEntry {
    pub product_id: String,
    pub product_type: String,
    pub brand: String,
    pub division: String,
    pub title: String,
    pub description: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_features: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_features_ref: Option<String>,
    #[serde(default)]
    pub attributes: BTreeMap<String, Option<String>>,
}

impl CatalogueEntry {
    pub fn text(&self) -> String {
        format!("{} {}", self.title, self.description)
    }
}

/// A rejected input line with its 1-based location.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Rejection {
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct Loaded<T> {
    pub records: Vec<T>,
    pub rejects: Vec<Rejection>,
}

/// Reads a catalogue file. Every line either yields an entry with inline
/// image features (references are resolved relative to the file) or a
/// [`Rejection`]. Shot dimensionality is fixed by the first accepted line.
pub fn load_catalogue(path: &Path) -> Result<Loaded<CatalogueEntry>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut records = Vec::new();
    let mut rejects = Vec::new();
    let mut shot_dim: Option<usize> = None;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        match parse_entry(&line, base, shot_dim) {
            Ok(entry) => {
                shot_dim.get_or_insert(entry.image_features.as_ref().unwrap()[0].len());
                records.push(entry);
            }
            Err(reason) => rejects.push(Rejection { line: line_no, reason }),
        }
    }
    Ok(Loaded { records, rejects })
}

fn parse_entry(line: &str, base: &Path, shot_dim: Option<usize>) -> std::result::Result<CatalogueEntry, String> {
    let mut entry: CatalogueEntry = serde_json::from_str(line).map_err(|e| e.to_string())?;
    if entry.product_id.is_empty() {
        return Err("empty product_id".into());
    }
    let shots = match (entry.image_features.take(), entry.image_features_ref.take()) {
        (Some(s), None) => s,
        (None, Some(r)) => {
            let p = base.join(&r);
            let text = std::fs::read_to_string(&p).map_err(|e| format!("image_features_ref {}: {}", r, e))?;
            serde_json::from_str::<Vec<Vec<f64>>>(&text).map_err(|e| format!("image_features_ref {}: {}", r, e))?
        }
        (Some(_), Some(_)) => return Err("both image_features and image_features_ref given".into()),
        (None, None) => return Err("missing image_features".into()),
    };
    if shots.len() != NUM_SHOTS {
        return Err(format!("expected {} image shots, got {}", NUM_SHOTS, shots.len()));
    }
    let dim = shot_dim.unwrap_or(shots[0].len());
    if dim == 0 || shots.iter().any(|s| s.len() != dim) {
        return Err(format!("image shots must all have dimension {}", dim));
    }
    if shots.iter().flatten().any(|v| !v.is_finite()) {
        return Err("non-finite image feature".into());
    }
    entry.image_features = Some(shots);
    Ok(entry)
}

pub fn write_catalogue(path: &Path, entries: &[CatalogueEntry]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for e in entries {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaxonomyEntry {
    pub name: String,
    pub applicable_product_types: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_support: Option<usize>,
}

pub fn load_taxonomy(path: &Path) -> Result<Vec<TaxonomyEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let entries: Vec<TaxonomyEntry> = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        line: e.line(),
        reason: e.to_string(),
    })?;
    if entries.is_empty() {
        return Err(Error::Empty("taxonomy has no attributes".into()));
    }
    Ok(entries)
}

pub fn write_taxonomy(path: &Path, entries: &[TaxonomyEntry]) -> Result<()> {
    let text = serde_json::to_string_pretty(entries)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// One catalogue item in model-ready form. `attribute_labels` keeps the raw
/// label strings; `None` marks an absent label. Label ids are assigned per
/// task when task datasets are built.
#[derive(Debug, Clone, PartialEq)]
pub struct ProductRecord {
    pub product_id: String,
    pub product_type_id: usize,
    pub brand_id: usize,
    pub division_id: usize,
    pub text_tokens: Vec<usize>,
    pub image_shot_features: Vec<Vec<f64>>,
    pub attribute_labels: BTreeMap<String, Option<String>>,
}

/// Vocabularies that map catalogue strings to model ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogueVocabs {
    pub words: Vocabulary,
    pub product_types: CategoryVocab,
    pub brands: CategoryVocab,
    pub divisions: CategoryVocab,
    pub max_seq_len: usize,
    pub shot_dim: usize,
}

impl CatalogueVocabs {
    pub fn build(entries: &[CatalogueEntry], min_token_count: usize, max_seq_len: usize) -> Result<Self> {
        let first = entries.first().ok_or_else(|| Error::Empty("catalogue has no products".into()))?;
        let texts: Vec<String> = entries.iter().map(CatalogueEntry::text).collect();
        Ok(CatalogueVocabs {
            words: Vocabulary::build(texts.iter().map(String::as_str), min_token_count),
            product_types: CategoryVocab::build(entries.iter().map(|e| e.product_type.as_str())),
            brands: CategoryVocab::build(entries.iter().map(|e| e.brand.as_str())),
            divisions: CategoryVocab::build(entries.iter().map(|e| e.division.as_str())),
            max_seq_len,
            shot_dim: first.image_features.as_ref().map(|s| s[0].len()).unwrap_or(0),
        })
    }

    pub fn encode(&self, entry: &CatalogueEntry) -> Result<ProductRecord> {
        let shots = entry
            .image_features
            .clone()
            .ok_or_else(|| Error::Empty(format!("{}: image features not loaded", entry.product_id)))?;
        if shots.len() != NUM_SHOTS || shots.iter().any(|s| s.len() != self.shot_dim) {
            return Err(Error::dim(
                "encode",
                format!("{}: expected {}×{} shot features", entry.product_id, NUM_SHOTS, self.shot_dim),
            ));
        }
        Ok(ProductRecord {
            product_id: entry.product_id.clone(),
            product_type_id: self.product_types.id(&entry.product_type),
            brand_id: self.brands.id(&entry.brand),
            division_id: self.divisions.id(&entry.division),
            text_tokens: self.words.tokenize(&entry.text(), self.max_seq_len),
            image_shot_features: shots,
            attribute_labels: entry.attributes.clone(),
        })
    }

    pub fn encode_all(&self, entries: &[CatalogueEntry]) -> Result<Vec<ProductRecord>> {
        entries.iter().map(|e| self.encode(e)).collect()
    }
}
