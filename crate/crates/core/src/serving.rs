//! Offline batch rewriting into a key-value table, and union retrieval at
//! query time.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{normalize, tokenize};
use crate::datasetgen::{render_rewrite_prompt, REWRITE_PROMPT_CAP};
use crate::feedback::RelevanceScorer;
use crate::lexindex::{InvertedIndex, RetrievalSet, TOP_FRACTION};
use crate::model::{beam_search, ModelParams, Vocabulary};
use crate::{jsonl, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServingConfig {
    pub beam_width: usize,
    pub max_len: usize,
    pub tau_prime: f64,
}

impl Default for ServingConfig {
    fn default() -> Self {
        ServingConfig {
            beam_width: 5,
            max_len: 6,
            tau_prime: 0.5,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoverageStats {
    /// Distinct normalized queries offered to the builder.
    pub considered: usize,
    /// Queries under the coverage threshold.
    pub eligible: usize,
    /// Eligible queries that received a rewrite.
    pub covered: usize,
    /// Eligible queries whose beam produced nothing but the query itself.
    pub identity_only: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableMeta {
    pub built_at: String,
    pub checkpoint_hash: String,
    pub stats: CoverageStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewriteTable {
    pub meta: TableMeta,
    entries: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderLine {
    header: TableMeta,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EntryLine {
    query: String,
    rewrite: String,
}

/// Seconds since the Unix epoch, as text.
pub fn timestamp_now() -> String {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs().to_string())
        .unwrap_or_else(|_| "0".into())
}

/// Encoded rewrite prompt for `query` with optional context titles.
pub fn rewrite_prompt_ids(
    vocab: &Vocabulary,
    query: &str,
    titles: &[String],
) -> Result<Vec<usize>> {
    let mut ids = vocab.encode(&render_rewrite_prompt(query, titles)?);
    ids.truncate(REWRITE_PROMPT_CAP);
    Ok(ids)
}

/// A query offered to the table builder, with the titles its prompt embeds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TableQuery {
    pub query: String,
    pub titles: Vec<String>,
}

impl From<&str> for TableQuery {
    fn from(q: &str) -> Self {
        TableQuery {
            query: q.to_string(),
            titles: Vec::new(),
        }
    }
}

impl RewriteTable {
    pub fn new(meta: TableMeta, entries: BTreeMap<String, String>) -> Self {
        RewriteTable { meta, entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &BTreeMap<String, String> {
        &self.entries
    }

    pub fn lookup(&self, query: &str) -> Option<&str> {
        self.entries.get(&normalize(query)).map(String::as_str)
    }

    pub fn render(&self) -> String {
        let mut out = serde_json::to_string(&HeaderLine {
            header: self.meta.clone(),
        })
        .expect("header serializes");
        out.push('\n');
        for (q, r) in &self.entries {
            out.push_str(
                &serde_json::to_string(&EntryLine {
                    query: q.clone(),
                    rewrite: r.clone(),
                })
                .expect("entry serializes"),
            );
            out.push('\n');
        }
        out
    }

    /// Entry lines only, without the header.
    pub fn entries_text(&self) -> String {
        let s = self.render();
        s.split_once('\n')
            .map(|(_, rest)| rest.to_string())
            .unwrap_or_default()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        jsonl::write_atomic(path, self.render().as_bytes())
    }

    pub fn parse(path: &Path, text: &str) -> Result<Self> {
        let bad = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate();
        let (_, first) = lines
            .next()
            .ok_or_else(|| bad(1, "missing header".into()))?;
        let header: HeaderLine = serde_json::from_str(first).map_err(|e| bad(1, e.to_string()))?;
        let mut entries = BTreeMap::new();
        let mut last: Option<String> = None;
        for (i, line) in lines {
            let e: EntryLine = serde_json::from_str(line).map_err(|e| bad(i + 1, e.to_string()))?;
            if last.as_ref().is_some_and(|l| l >= &e.query) {
                return Err(bad(i + 1, "keys must be unique and sorted".into()));
            }
            if e.query != normalize(&e.query) || tokenize(&e.rewrite).is_empty() {
                return Err(bad(i + 1, "key not normalized or empty rewrite".into()));
            }
            last = Some(e.query.clone());
            entries.insert(e.query, e.rewrite);
        }
        Ok(RewriteTable {
            meta: header.header,
            entries,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(path, &text)
    }
}

enum Outcome {
    Skip,
    Ineligible,
    Identity,
    Rewrite(String, String),
}

/// Rewrites every query whose relevant fraction is below the coverage
/// threshold and keeps the best beam candidate that differs from the query.
#[allow(clippy::too_many_arguments)]
pub fn build_rewrite_table(
    params: &ModelParams,
    vocab: &Vocabulary,
    queries: &[TableQuery],
    index: &InvertedIndex,
    scorer: &dyn RelevanceScorer,
    cfg: &ServingConfig,
    checkpoint_hash: &str,
    built_at: &str,
) -> Result<RewriteTable> {
    // First occurrence of each normalized query supplies its titles.
    let mut seen = BTreeMap::new();
    for tq in queries {
        let q = normalize(&tq.query);
        if !q.is_empty() {
            seen.entry(q).or_insert_with(|| tq.titles.clone());
        }
    }
    let distinct: Vec<(String, Vec<String>)> = seen.into_iter().collect();

    let outcomes = distinct
        .par_iter()
        .map(|(q, titles)| {
            let zx = match index.retrieve(q) {
                Ok(z) => z,
                Err(Error::EmptyQuery) => return Ok(Outcome::Skip),
                Err(e) => return Err(e),
            };
            if index.relevant_fraction(q, &zx, scorer, cfg.tau_prime) >= TOP_FRACTION {
                return Ok(Outcome::Ineligible);
            }
            let prompt = rewrite_prompt_ids(vocab, q, titles)?;
            let best = beam_search(params, vocab, &prompt, cfg.beam_width, cfg.max_len)
                .into_iter()
                .map(|c| normalize(&c.text))
                .find(|t| !t.is_empty() && t != q);
            Ok(match best {
                Some(r) => Outcome::Rewrite(q.clone(), r),
                None => Outcome::Identity,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut stats = CoverageStats::default();
    let mut entries = BTreeMap::new();
    for o in outcomes {
        if matches!(o, Outcome::Skip) {
            continue;
        }
        stats.considered += 1;
        match o {
            Outcome::Ineligible | Outcome::Skip => {}
            Outcome::Identity => {
                stats.eligible += 1;
                stats.identity_only += 1;
            }
            Outcome::Rewrite(q, r) => {
                stats.eligible += 1;
                stats.covered += 1;
                entries.insert(q, r);
            }
        }
    }
    Ok(RewriteTable {
        meta: TableMeta {
            built_at: built_at.to_string(),
            checkpoint_hash: checkpoint_hash.to_string(),
            stats,
        },
        entries,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServeResult {
    pub final_set: RetrievalSet,
    pub used_rewrite: Option<String>,
    pub covered: bool,
}

/// `retrieve(query)`, unioned with `retrieve(rewrite)` when the table has one.
pub fn serve_retrieve(
    index: &InvertedIndex,
    table: &RewriteTable,
    query: &str,
) -> Result<ServeResult> {
    let zx = index.retrieve(query)?;
    match table.lookup(query) {
        Some(r) => {
            let zy = index.retrieve(r)?;
            Ok(ServeResult {
                final_set: zx.union(&zy),
                used_rewrite: Some(r.to_string()),
                covered: true,
            })
        }
        None => Ok(ServeResult {
            final_set: zx,
            used_rewrite: None,
            covered: false,
        }),
    }
}

/// One output line of the serve command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServeRecord {
    pub query: String,
    pub covered: bool,
    pub used_rewrite: Option<String>,
    pub candidate_ids: Vec<String>,
}

impl ServeRecord {
    pub fn new(index: &InvertedIndex, query: &str, r: &ServeResult) -> Self {
        ServeRecord {
            query: query.to_string(),
            covered: r.covered,
            used_rewrite: r.used_rewrite.clone(),
            candidate_ids: r
                .final_set
                .iter()
                .map(|d| index.product_id(d).to_string())
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Catalog, Product};
    use crate::feedback::TokenOverlap;
    use crate::lexindex::build_index;
    use crate::model::{build_vocab, ModelConfig};

    fn product(id: &str, title: &str) -> Product {
        Product {
            id: id.into(),
            title: title.into(),
            excellent: false,
        }
    }

    fn table(pairs: &[(&str, &str)]) -> RewriteTable {
        RewriteTable::new(
            TableMeta {
                built_at: "0".into(),
                checkpoint_hash: "abc".into(),
                stats: CoverageStats::default(),
            },
            pairs
                .iter()
                .map(|(q, r)| (q.to_string(), r.to_string()))
                .collect(),
        )
    }

    fn index() -> InvertedIndex {
        build_index(
            &Catalog::new(vec![
                product("a", "red dress"),
                product("b", "blue coat"),
                product("c", "blue coat long"),
            ])
            .unwrap(),
        )
    }

    #[test]
    fn lookup_normalizes() {
        let t = table(&[("red frock", "red dress")]);
        assert_eq!(t.lookup("red frock"), Some("red dress"));
        assert_eq!(t.lookup("  RED   Frock "), Some("red dress"));
        assert_eq!(t.lookup("green hat"), None);
    }

    #[test]
    fn serve_union() {
        let idx = index();
        let t = table(&[("red dress", "blue coat"), ("blue coat", "zebra")]);
        let r = serve_retrieve(&idx, &t, "red dress").unwrap();
        assert!(r.covered);
        assert_eq!(r.final_set.len(), 3);
        let r = serve_retrieve(&idx, &t, "blue coat").unwrap();
        assert!(r.covered && r.used_rewrite.as_deref() == Some("zebra"));
        assert_eq!(r.final_set, idx.retrieve("blue coat").unwrap());
        let r = serve_retrieve(&idx, &t, "long").unwrap();
        assert!(!r.covered && r.used_rewrite.is_none());
        assert_eq!(r.final_set, idx.retrieve("long").unwrap());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("table.jsonl");
        let t = table(&[("b q", "x"), ("a q", "y z")]);
        t.save(&p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        let back = RewriteTable::load(&p).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.render().as_bytes(), &bytes[..]);
        let unsorted = "{\"header\":{\"built_at\":\"0\",\"checkpoint_hash\":\"\",\"stats\":{\"considered\":0,\"eligible\":0,\"covered\":0,\"identity_only\":0}}}\n{\"query\":\"b\",\"rewrite\":\"x\"}\n{\"query\":\"a\",\"rewrite\":\"x\"}\n";
        assert!(RewriteTable::parse(&p, unsorted).is_err());
    }

    #[test]
    fn coverage_rule() {
        let idx = index();
        let vocab = build_vocab(["red dress blue coat long query rewrite"], 1).unwrap();
        let params = ModelParams::init(
            ModelConfig {
                vocab_size: vocab.len(),
                embed_dim: 4,
                hidden_dim: 4,
            },
            1,
        );
        // "blue coat" matches two relevant titles; "zebra" retrieves nothing.
        let qs: Vec<TableQuery> = ["blue coat", "zebra", "Zebra "]
            .map(TableQuery::from)
            .to_vec();
        let t = build_rewrite_table(
            &params,
            &vocab,
            &qs,
            &idx,
            &TokenOverlap,
            &ServingConfig::default(),
            "h",
            "0",
        )
        .unwrap();
        assert!(t.lookup("blue coat").is_none());
        assert_eq!(t.meta.stats.considered, 2);
        assert_eq!(t.meta.stats.eligible, 1);
        assert_eq!(t.meta.stats.covered + t.meta.stats.identity_only, 1);
        for (k, v) in t.entries() {
            assert_ne!(k, v);
            assert!(!tokenize(v).is_empty());
        }
    }
}
