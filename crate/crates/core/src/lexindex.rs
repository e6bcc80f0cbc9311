//! Exact-match retrieval: inverted index, conjunctive matching, union
//! retrieval and Top/Torso/Tail query segmentation.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, Catalog, TokenList};
use crate::feedback::RelevanceScorer;
use crate::{jsonl, Error, Result};

/// Position of a product in catalog order.
pub type DocId = u32;

/// Sorted, duplicate-free set of documents.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct RetrievalSet(Vec<DocId>);

impl RetrievalSet {
    pub fn empty() -> Self {
        RetrievalSet(Vec::new())
    }

    pub fn from_unsorted(mut ids: Vec<DocId>) -> Self {
        ids.sort_unstable();
        ids.dedup();
        RetrievalSet(ids)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, id: DocId) -> bool {
        self.0.binary_search(&id).is_ok()
    }

    pub fn iter(&self) -> impl Iterator<Item = DocId> + '_ {
        self.0.iter().copied()
    }

    pub fn as_slice(&self) -> &[DocId] {
        &self.0
    }

    pub fn union(&self, other: &RetrievalSet) -> RetrievalSet {
        let (a, b) = (&self.0, &other.0);
        let mut out = Vec::with_capacity(a.len() + b.len());
        let (mut i, mut j) = (0, 0);
        while i < a.len() && j < b.len() {
            match a[i].cmp(&b[j]) {
                std::cmp::Ordering::Less => {
                    out.push(a[i]);
                    i += 1;
                }
                std::cmp::Ordering::Greater => {
                    out.push(b[j]);
                    j += 1;
                }
                std::cmp::Ordering::Equal => {
                    out.push(a[i]);
                    i += 1;
                    j += 1;
                }
            }
        }
        out.extend_from_slice(&a[i..]);
        out.extend_from_slice(&b[j..]);
        RetrievalSet(out)
    }

    pub fn intersect(&self, other: &RetrievalSet) -> RetrievalSet {
        RetrievalSet(intersect_sorted(&self.0, &other.0))
    }

    pub fn is_subset(&self, other: &RetrievalSet) -> bool {
        self.0.iter().all(|&d| other.contains(d))
    }
}

impl FromIterator<DocId> for RetrievalSet {
    fn from_iter<I: IntoIterator<Item = DocId>>(iter: I) -> Self {
        RetrievalSet::from_unsorted(iter.into_iter().collect())
    }
}

fn intersect_sorted(a: &[DocId], b: &[DocId]) -> Vec<DocId> {
    let mut out = Vec::with_capacity(a.len().min(b.len()));
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                out.push(a[i]);
                i += 1;
                j += 1;
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchMode {
    /// Every query term must appear in the title.
    #[default]
    And,
    /// Any query term suffices. Experimental.
    Or,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum QuerySegment {
    Top,
    Torso,
    Tail,
}

impl QuerySegment {
    pub const ALL: [QuerySegment; 3] = [QuerySegment::Top, QuerySegment::Torso, QuerySegment::Tail];

    /// `> 0.7` is Top, `< 0.1` is Tail, both boundaries land in Torso.
    pub fn from_fraction(fraction: f64) -> Self {
        if fraction > TOP_FRACTION {
            QuerySegment::Top
        } else if fraction < TAIL_FRACTION {
            QuerySegment::Tail
        } else {
            QuerySegment::Torso
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            QuerySegment::Top => "Top",
            QuerySegment::Torso => "Torso",
            QuerySegment::Tail => "Tail",
        }
    }
}

pub const TOP_FRACTION: f64 = 0.7;
pub const TAIL_FRACTION: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct InvertedIndex {
    postings: HashMap<String, Vec<DocId>>,
    ids: Vec<String>,
    positions: HashMap<String, DocId>,
    titles: Vec<TokenList>,
    excellent: Vec<bool>,
    mode: MatchMode,
}

pub fn build_index(catalog: &Catalog) -> InvertedIndex {
    InvertedIndex::build(catalog, MatchMode::And)
}

impl InvertedIndex {
    pub fn build(catalog: &Catalog, mode: MatchMode) -> Self {
        let n = catalog.len();
        let mut postings: HashMap<String, Vec<DocId>> = HashMap::new();
        let mut ids = Vec::with_capacity(n);
        let mut positions = HashMap::with_capacity(n);
        let mut titles = Vec::with_capacity(n);
        let mut excellent = Vec::with_capacity(n);
        for (doc, p) in catalog.products().iter().enumerate() {
            let doc = doc as DocId;
            let toks = tokenize(&p.title);
            for t in &toks {
                let list = postings.entry(t.clone()).or_default();
                // Docs arrive in ascending order, so only the tail can repeat.
                if list.last() != Some(&doc) {
                    list.push(doc);
                }
            }
            ids.push(p.id.clone());
            positions.insert(p.id.clone(), doc);
            titles.push(toks);
            excellent.push(p.excellent);
        }
        InvertedIndex {
            postings,
            ids,
            positions,
            titles,
            excellent,
            mode,
        }
    }

    pub fn mode(&self) -> MatchMode {
        self.mode
    }

    pub fn catalog_size(&self) -> usize {
        self.ids.len()
    }

    pub fn postings(&self, term: &str) -> &[DocId] {
        self.postings.get(term).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn term_count(&self) -> usize {
        self.postings.len()
    }

    pub fn product_id(&self, doc: DocId) -> &str {
        &self.ids[doc as usize]
    }

    pub fn doc_id(&self, product_id: &str) -> Option<DocId> {
        self.positions.get(product_id).copied()
    }

    pub fn title_tokens(&self, doc: DocId) -> &TokenList {
        &self.titles[doc as usize]
    }

    pub fn is_excellent(&self, doc: DocId) -> bool {
        self.excellent[doc as usize]
    }

    /// The excellent-product set of the catalog.
    pub fn excellent_set(&self) -> RetrievalSet {
        (0..self.ids.len() as DocId)
            .filter(|&d| self.excellent[d as usize])
            .collect()
    }

    /// Maps product ids to documents, skipping ids not in the catalog.
    pub fn to_set<'a>(&self, ids: impl IntoIterator<Item = &'a str>) -> RetrievalSet {
        ids.into_iter().filter_map(|id| self.doc_id(id)).collect()
    }

    pub fn retrieve(&self, text: &str) -> Result<RetrievalSet> {
        self.retrieve_tokens(&tokenize(text))
    }

    pub fn retrieve_tokens(&self, tokens: &TokenList) -> Result<RetrievalSet> {
        if tokens.is_empty() {
            return Err(Error::EmptyQuery);
        }
        match self.mode {
            MatchMode::And => {
                let mut lists: Vec<&[DocId]> = tokens.iter().map(|t| self.postings(t)).collect();
                lists.sort_by_key(|l| l.len());
                let mut acc = lists[0].to_vec();
                for l in &lists[1..] {
                    if acc.is_empty() {
                        break;
                    }
                    acc = intersect_sorted(&acc, l);
                }
                Ok(RetrievalSet(acc))
            }
            MatchMode::Or => Ok(tokens
                .iter()
                .flat_map(|t| self.postings(t).iter().copied())
                .collect()),
        }
    }

    /// `retrieve(query) ∪ retrieve(rewrite)`; a rewrite with no tokens adds nothing.
    pub fn retrieve_union(&self, query: &str, rewrite: &str) -> Result<RetrievalSet> {
        let zx = self.retrieve(query)?;
        let rw = tokenize(rewrite);
        if rw.is_empty() {
            return Ok(zx);
        }
        Ok(zx.union(&self.retrieve_tokens(&rw)?))
    }

    /// Fraction of `set` whose titles score above `tau_prime` against `query`.
    pub fn relevant_fraction(
        &self,
        query: &str,
        set: &RetrievalSet,
        scorer: &dyn RelevanceScorer,
        tau_prime: f64,
    ) -> f64 {
        if set.is_empty() {
            return 0.0;
        }
        let q = tokenize(query);
        let hits = set
            .iter()
            .filter(|&d| scorer.score(&q, self.title_tokens(d)) > tau_prime)
            .count();
        hits as f64 / set.len() as f64
    }

    pub fn segment_query(
        &self,
        query: &str,
        scorer: &dyn RelevanceScorer,
        tau_prime: f64,
    ) -> Result<QuerySegment> {
        let zx = self.retrieve(query)?;
        Ok(QuerySegment::from_fraction(
            self.relevant_fraction(query, &zx, scorer, tau_prime),
        ))
    }

    /// Writes `{term, ids}` lines sorted by term.
    pub fn dump(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Row<'a> {
            term: &'a str,
            ids: Vec<&'a str>,
        }
        let sorted: BTreeMap<&str, &Vec<DocId>> =
            self.postings.iter().map(|(k, v)| (k.as_str(), v)).collect();
        let rows: Vec<Row> = sorted
            .into_iter()
            .map(|(term, docs)| Row {
                term,
                ids: docs.iter().map(|&d| self.product_id(d)).collect(),
            })
            .collect();
        jsonl::write(path, &rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic_world, Product};
    use crate::feedback::TokenOverlap;
    use proptest::prelude::*;

    fn catalog(rows: &[(&str, &str)]) -> Catalog {
        Catalog::new(
            rows.iter()
                .map(|(id, t)| Product {
                    id: id.to_string(),
                    title: t.to_string(),
                    excellent: false,
                })
                .collect(),
        )
        .unwrap()
    }

    fn ids(idx: &InvertedIndex, set: &RetrievalSet) -> Vec<String> {
        set.iter().map(|d| idx.product_id(d).to_string()).collect()
    }

    #[test]
    fn single_product_postings() {
        let idx = build_index(&catalog(&[("p1", "red dress")]));
        assert_eq!(idx.term_count(), 2);
        assert_eq!(idx.postings("red"), &[0]);
        assert_eq!(idx.postings("dress"), &[0]);
    }

    #[test]
    fn conjunctive_retrieval() {
        let idx = build_index(&catalog(&[("p1", "red dress"), ("p2", "blue dress")]));
        assert_eq!(ids(&idx, &idx.retrieve("dress").unwrap()), ["p1", "p2"]);
        assert_eq!(ids(&idx, &idx.retrieve("red dress").unwrap()), ["p1"]);
        assert!(idx.retrieve("green dress").unwrap().is_empty());
        assert!(matches!(idx.retrieve(" ,, "), Err(Error::EmptyQuery)));
    }

    #[test]
    fn disjunctive_mode() {
        let cat = catalog(&[
            ("p1", "red dress"),
            ("p2", "blue dress"),
            ("p3", "green coat"),
        ]);
        let idx = InvertedIndex::build(&cat, MatchMode::Or);
        assert_eq!(ids(&idx, &idx.retrieve("red coat").unwrap()), ["p1", "p3"]);
    }

    #[test]
    fn union_retrieval() {
        let idx = build_index(&catalog(&[
            ("a1", "alpha one"),
            ("a2", "alpha two"),
            ("b1", "beta one"),
            ("b2", "beta two"),
            ("b3", "beta three"),
        ]));
        let q = idx.retrieve("alpha").unwrap();
        assert_eq!(idx.retrieve_union("alpha", "alpha").unwrap(), q);
        assert_eq!(idx.retrieve_union("alpha", "gamma").unwrap(), q);
        assert_eq!(idx.retrieve_union("alpha", "").unwrap(), q);
        // alpha → {a1,a2}, beta → {b1,b2,b3}: provably disjoint, 2 + 3.
        assert_eq!(idx.retrieve_union("alpha", "beta").unwrap().len(), 5);
    }

    #[test]
    fn relevant_fraction_cases() {
        let idx = build_index(&catalog(&[
            ("p1", "red dress"),
            ("p2", "red coat"),
            ("p3", "blue shirt"),
            ("p4", "green hat"),
        ]));
        let s = &TokenOverlap;
        let all = idx.retrieve("red").unwrap();
        assert_eq!(idx.relevant_fraction("red", &all, s, 0.5), 1.0);
        assert_eq!(
            idx.relevant_fraction("red", &RetrievalSet::empty(), s, 0.5),
            0.0
        );
        // f("red dress", ·) over the four titles: 1.0, 0.5, 0.0, 0.0 → one passes 0.5.
        let four: RetrievalSet = (0..4).collect();
        assert_eq!(idx.relevant_fraction("red dress", &four, s, 0.5), 0.25);
    }

    #[test]
    fn segment_boundaries() {
        assert_eq!(QuerySegment::from_fraction(0.8), QuerySegment::Top);
        assert_eq!(QuerySegment::from_fraction(0.05), QuerySegment::Tail);
        assert_eq!(QuerySegment::from_fraction(0.7), QuerySegment::Torso);
        assert_eq!(QuerySegment::from_fraction(0.1), QuerySegment::Torso);
        assert_eq!(QuerySegment::from_fraction(0.0), QuerySegment::Tail);
        assert_eq!(QuerySegment::from_fraction(1.0), QuerySegment::Top);

        let idx = build_index(&catalog(&[("p1", "red dress")]));
        assert_eq!(
            idx.segment_query("green", &TokenOverlap, 0.5).unwrap(),
            QuerySegment::Tail
        );
        assert_eq!(
            idx.segment_query("red", &TokenOverlap, 0.5).unwrap(),
            QuerySegment::Top
        );
    }

    #[test]
    fn synthetic_postings_match_title_scan() {
        let w = generate_synthetic_world(5, 100, 10, 60);
        let idx = build_index(&w.catalog);
        let mut scan: BTreeMap<String, Vec<DocId>> = BTreeMap::new();
        for (d, p) in w.catalog.products().iter().enumerate() {
            for t in tokenize(&p.title).into_vec() {
                let e = scan.entry(t).or_default();
                if !e.contains(&(d as DocId)) {
                    e.push(d as DocId);
                }
            }
        }
        assert_eq!(scan.len(), idx.term_count());
        for (t, docs) in &scan {
            assert_eq!(idx.postings(t), docs.as_slice(), "term {t}");
        }
    }

    proptest! {
        #[test]
        fn adding_a_token_never_enlarges(seed in 0u64..50, extra in 0usize..200) {
            let w = generate_synthetic_world(seed, 60, 20, 40);
            let idx = build_index(&w.catalog);
            let terms: Vec<String> = w.catalog.products().iter()
                .flat_map(|p| tokenize(&p.title).into_vec()).collect();
            for r in &w.logs {
                let base = idx.retrieve(&r.query).unwrap();
                let longer = format!("{} {}", r.query, terms[extra % terms.len()]);
                let narrowed = idx.retrieve(&longer).unwrap();
                prop_assert!(narrowed.is_subset(&base));
                prop_assert!(base.is_subset(&idx.retrieve_union(&r.query, &longer).unwrap()));
            }
        }

        #[test]
        fn set_union_and_intersection(a in proptest::collection::vec(0u32..50, 0..30),
                                      b in proptest::collection::vec(0u32..50, 0..30)) {
            let sa = RetrievalSet::from_unsorted(a.clone());
            let sb = RetrievalSet::from_unsorted(b.clone());
            let u = sa.union(&sb);
            let i = sa.intersect(&sb);
            for x in 0u32..50 {
                prop_assert_eq!(u.contains(x), a.contains(&x) || b.contains(&x));
                prop_assert_eq!(i.contains(x), a.contains(&x) && b.contains(&x));
            }
            prop_assert!(u.as_slice().windows(2).all(|w| w[0] < w[1]));
        }
    }
}
