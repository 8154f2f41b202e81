//! Item content features for the recommender (JSON lines of named blocks).

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::catalogue::Rejection;
use super::interactions::ItemRegistry;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One line of the feature file. Blocks are concatenated in name order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureLine {
    pub product_id: String,
    pub blocks: BTreeMap<String, Vec<f64>>,
}

/// Raw (unnormalised) feature matrix aligned with an item registry.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemFeatures {
    pub blocks: Vec<(String, usize)>,
    /// `[n_items, #a]`
    pub matrix: Tensor,
}

impl ItemFeatures {
    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn num_items(&self) -> usize {
        self.matrix.rows()
    }

    pub fn row(&self, item: usize) -> &[f64] {
        self.matrix.row(item)
    }
}

pub fn write_features(path: &Path, lines: &[FeatureLine]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for l in lines {
        serde_json::to_writer(&mut w, l)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads every line of a feature file. The block layout (names and widths)
/// is fixed by the first accepted line.
pub fn load_feature_lines(path: &Path) -> Result<(Vec<FeatureLine>, Vec<Rejection>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut layout: Option<Vec<(String, usize)>> = None;
    let mut lines = Vec::new();
    let mut rejects = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: FeatureLine = match serde_json::from_str(&line) {
            Ok(l) => l,
            Err(e) => {
                rejects.push(Rejection {
                    line: i + 1,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        let this: Vec<(String, usize)> = parsed.blocks.iter().map(|(n, v)| (n.clone(), v.len())).collect();
        let reason = match &layout {
            _ if parsed.blocks.values().flatten().any(|v| !v.is_finite()) => Some("non-finite feature value".to_string()),
            Some(l) if *l != this => Some("feature blocks differ from the first line".to_string()),
            _ => None,
        };
        if let Some(reason) = reason {
            rejects.push(Rejection { line: i + 1, reason });
            continue;
        }
        layout.get_or_insert(this);
        lines.push(parsed);
    }
    Ok((lines, rejects))
}

/// Registry in file order plus the aligned feature matrix. Duplicate
/// product ids are an error.
pub fn features_from_lines(lines: &[FeatureLine]) -> Result<(ItemRegistry, ItemFeatures)> {
    let first = lines.first().ok_or_else(|| Error::Empty("feature file has no items".into()))?;
    let blocks: Vec<(String, usize)> = first.blocks.iter().map(|(n, v)| (n.clone(), v.len())).collect();
    let dim: usize = blocks.iter().map(|b| b.1).sum();
    let registry = ItemRegistry::new(lines.iter().map(|l| l.product_id.clone()).collect())?;
    let mut data = Vec::with_capacity(lines.len() * dim);
    for l in lines {
        for (name, width) in &blocks {
            let v = l.blocks.get(name).filter(|v| v.len() == *width).ok_or_else(|| {
                Error::dim("features", format!("{}: block {} missing or resized", l.product_id, name))
            })?;
            data.extend_from_slice(v);
        }
    }
    let matrix = Tensor::new(vec![lines.len(), dim], data)?;
    Ok((registry, ItemFeatures { blocks, matrix }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(id: &str, a: Vec<f64>, b: Vec<f64>) -> FeatureLine {
        FeatureLine {
            product_id: id.into(),
            blocks: BTreeMap::from([("b".to_string(), b), ("a".to_string(), a)]),
        }
    }

    #[test]
    fn blocks_concatenate_in_name_order() {
        let (reg, f) = features_from_lines(&[line("x", vec![1.0], vec![2.0, 3.0]), line("y", vec![4.0], vec![5.0, 6.0])]).unwrap();
        assert_eq!(reg.index_of("y"), Some(1));
        assert_eq!(f.row(1), &[4.0, 5.0, 6.0]);
        assert_eq!(f.blocks, vec![("a".to_string(), 1), ("b".to_string(), 2)]);
    }

    #[test]
    fn loader_rejects_mismatched_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.jsonl");
        write_features(&p, &[line("x", vec![1.0], vec![2.0]), line("y", vec![1.0, 2.0], vec![2.0])]).unwrap();
        let mut text = std::fs::read_to_string(&p).unwrap();
        text.push_str("{\"product_id\": 3}\n");
        std::fs::write(&p, text).unwrap();
        let (lines, rejects) = load_feature_lines(&p).unwrap();
        assert_eq!(lines.len(), 1);
        assert_eq!(rejects.iter().map(|r| r.line).collect::<Vec<_>>(), vec![2, 3]);
    }

    #[test]
    fn duplicate_ids_are_errors() {
        assert!(features_from_lines(&[line("x", vec![1.0], vec![2.0]), line("x", vec![1.0], vec![2.0])]).is_err());
    }
}
