use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
const PAD_TOKEN: &str = "<pad>";
const UNK_TOKEN: &str = "<unk>";

/// Lowercases and splits on every non-alphanumeric character.
pub fn split_words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
        .collect()
}

/// Word vocabulary. Id 0 is padding, id 1 is the unknown token, surviving
/// tokens follow in lexicographic order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { tokens, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl Vocabulary {
    /// Counts words over `texts`; words seen fewer than `min_token_count`
    /// times are left out and will encode as [`UNK_ID`].
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, min_token_count: usize) -> Self {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for t in texts {
            for w in split_words(t) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut tokens = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        tokens.extend(
            counts
                .into_iter()
                .filter(|(_, c)| *c >= min_token_count.max(1))
                .map(|(w, _)| w),
        );
        Vocabulary::from(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// First `max_seq_len` word ids of `text`, right-padded with [`PAD_ID`].
    pub fn tokenize(&self, text: &str, max_seq_len: usize) -> Vec<usize> {
        let mut ids: Vec<usize> = split_words(text)
            .iter()
            .take(max_seq_len)
            .map(|w| self.id(w))
            .collect();
        ids.resize(max_seq_len, PAD_ID);
        ids
    }
}

/// Categorical vocabulary for metadata (product type, brand, division).
/// Id 0 stands for values unseen when the vocabulary was built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct CategoryVocab {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for CategoryVocab {
    fn from(names: Vec<String>) -> Self {
        let index = names.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        CategoryVocab { names, index }
    }
}

impl From<CategoryVocab> for Vec<String> {
    fn from(v: CategoryVocab) -> Self {
        v.names
    }
}

impl CategoryVocab {
    pub fn build<'a>(values: impl IntoIterator<Item = &'a str>) -> Self {
        let mut names: Vec<String> = values.into_iter().map(str::to_string).collect();
        names.sort();
        names.dedup();
        names.insert(0, UNK_TOKEN.to_string());
        CategoryVocab::from(names)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, name: &str) -> usize {
        self.index.get(name).copied().unwrap_or(0)
    }

    pub fn lookup(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: usize) -> Option<&str> {
        self.names.get(id).map(String::as_str)
    }
}
