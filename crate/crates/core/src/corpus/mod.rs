//! Catalog, query logs and tokenization.

mod synth;

use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{jsonl, Error, Result};

pub use synth::{
    generate_synthetic_world, SynthConfig, World, COT_FILE, EVAL_FILE, LOGS_FILE, PRODUCTS_FILE,
    QUALITY_FILE,
};

/// Lowercased terms of a text, in order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct TokenList(Vec<String>);

impl TokenList {
    pub fn as_slice(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, String> {
        self.0.iter()
    }

    /// Canonical single-space form used as a table key.
    pub fn join(&self) -> String {
        self.0.join(" ")
    }

    pub fn into_vec(self) -> Vec<String> {
        self.0
    }
}

impl<'a> IntoIterator for &'a TokenList {
    type Item = &'a String;
    type IntoIter = std::slice::Iter<'a, String>;

    fn into_iter(self) -> Self::IntoIter {
        self.0.iter()
    }
}

/// Lowercases and splits on anything that is not alphanumeric.
pub fn tokenize(text: &str) -> TokenList {
    TokenList(
        text.to_lowercase()
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(str::to_owned)
            .collect(),
    )
}

/// `tokenize` followed by a single-space join.
pub fn normalize(text: &str) -> String {
    tokenize(text).join()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Product {
    pub id: String,
    pub title: String,
    pub excellent: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Catalog {
    products: Vec<Product>,
    by_id: HashMap<String, usize>,
}

impl Catalog {
    pub fn new(products: Vec<Product>) -> Result<Self> {
        if products.is_empty() {
            return Err(Error::EmptyCatalog);
        }
        let mut by_id = HashMap::with_capacity(products.len());
        for (i, p) in products.iter().enumerate() {
            if tokenize(&p.title).is_empty() {
                return Err(Error::EmptyTitle(p.id.clone()));
            }
            if by_id.insert(p.id.clone(), i).is_some() {
                return Err(Error::DuplicateId(p.id.clone()));
            }
        }
        Ok(Catalog { products, by_id })
    }

    pub fn products(&self) -> &[Product] {
        &self.products
    }

    pub fn len(&self) -> usize {
        self.products.len()
    }

    pub fn is_empty(&self) -> bool {
        self.products.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Product> {
        self.by_id.get(id).map(|&i| &self.products[i])
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.by_id.contains_key(id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryLogRecord {
    pub query: String,
    /// Ranked output of the legacy rewriter, best first.
    pub legacy_rewrites: Vec<String>,
    /// Most recent first.
    pub interacted_titles: Vec<String>,
    /// Out-of-search transactions attributed to this query.
    pub transactions: Vec<String>,
}

impl QueryLogRecord {
    /// Records without a legacy rewrite cannot seed the initial dataset.
    pub fn has_legacy_rewrite(&self) -> bool {
        !self.legacy_rewrites.is_empty()
    }

    pub fn transaction_set(&self) -> HashSet<&str> {
        self.transactions.iter().map(String::as_str).collect()
    }
}

pub fn load_catalog(path: &Path) -> Result<Catalog> {
    Catalog::new(jsonl::read(path)?)
}

pub fn save_catalog(path: &Path, catalog: &Catalog) -> Result<()> {
    jsonl::write(path, catalog.products())
}

pub fn load_logs(path: &Path, catalog: &Catalog) -> Result<Vec<QueryLogRecord>> {
    let records: Vec<QueryLogRecord> = jsonl::read(path)?;
    validate_logs(&records, catalog)?;
    Ok(records)
}

pub fn validate_logs(records: &[QueryLogRecord], catalog: &Catalog) -> Result<()> {
    for r in records {
        if let Some(id) = r.transactions.iter().find(|id| !catalog.contains(id)) {
            return Err(Error::UnknownProduct {
                query: r.query.clone(),
                id: id.clone(),
            });
        }
    }
    Ok(())
}

pub fn save_logs(path: &Path, records: &[QueryLogRecord]) -> Result<()> {
    jsonl::write(path, records)
}
