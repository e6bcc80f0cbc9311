//! Offline feedback: a pluggable query/title relevance scorer and the three
//! retrieval-quality scores used both for rejection sampling and for ranking
//! beam candidates.
//!
//! With `Z_x`, `Z_y` the retrieval sets of query and rewrite, `Z_e` the
//! excellent products, `E` the query's out-of-search transactions and
//! `rel(z)` meaning `f(query, title(z)) > τ′`:
//!
//! ```text
//! rele    = |{z ∈ Z_y : rel(z)}| / |Z_y|                      (0 if Z_y = ∅)
//! incr    = |{z ∈ Z_e ∩ (Z_x ∪ Z_y) : rel(z)}| / |{z ∈ Z_e ∩ Z_x : rel(z)}|
//! hitrate = |E ∩ (Z_x ∪ Z_y)| / |{e ∈ E : rel(e)}|
//! ```
//!
//! `incr` and `hitrate` are undefined (reported as `None`) when their
//! denominator is zero. Note that the hitrate numerator counts every
//! transacted product in the union, relevant or not, so it can exceed 1.

use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, QueryLogRecord, TokenList};
use crate::lexindex::{InvertedIndex, QuerySegment, RetrievalSet};
use crate::{Error, Result};

pub trait RelevanceScorer: Send + Sync {
    fn name(&self) -> &'static str;

    /// Score in `[0, 1]`. An empty query scores 0 against everything.
    fn score(&self, query: &TokenList, title: &TokenList) -> f64;
}

/// `|q ∩ t| / |q|` over token sets.
#[derive(Debug, Clone, Copy, Default)]
pub struct TokenOverlap;

impl RelevanceScorer for TokenOverlap {
    fn name(&self) -> &'static str {
        "overlap"
    }

    fn score(&self, query: &TokenList, title: &TokenList) -> f64 {
        let q: HashSet<&str> = query.iter().map(String::as_str).collect();
        if q.is_empty() {
            return 0.0;
        }
        let t: HashSet<&str> = title.iter().map(String::as_str).collect();
        q.intersection(&t).count() as f64 / q.len() as f64
    }
}

/// Symmetric `|q ∩ t| / |q ∪ t|`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Jaccard;

impl RelevanceScorer for Jaccard {
    fn name(&self) -> &'static str {
        "jaccard"
    }

    fn score(&self, query: &TokenList, title: &TokenList) -> f64 {
        let q: HashSet<&str> = query.iter().map(String::as_str).collect();
        if q.is_empty() {
            return 0.0;
        }
        let t: HashSet<&str> = title.iter().map(String::as_str).collect();
        q.intersection(&t).count() as f64 / q.union(&t).count() as f64
    }
}

pub fn scorer_by_name(name: &str) -> Result<Box<dyn RelevanceScorer>> {
    match name {
        "overlap" => Ok(Box::new(TokenOverlap)),
        "jaccard" => Ok(Box::new(Jaccard)),
        other => Err(Error::UnknownScorer(other.to_string())),
    }
}

/// `f(query, title)` on raw text.
pub fn relevance_f(scorer: &dyn RelevanceScorer, query: &str, title: &str) -> Result<f64> {
    let q = tokenize(query);
    if q.is_empty() {
        return Err(Error::EmptyQuery);
    }
    Ok(scorer.score(&q, &tokenize(title)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelevanceConfig {
    pub tau_prime: f64,
    pub scorer: String,
}

impl Default for RelevanceConfig {
    fn default() -> Self {
        RelevanceConfig {
            tau_prime: 0.5,
            scorer: "overlap".into(),
        }
    }
}

impl RelevanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_prime > 0.0 && self.tau_prime < 1.0) {
            return Err(Error::Config(format!(
                "tau_prime must lie in (0, 1), got {}",
                self.tau_prime
            )));
        }
        scorer_by_name(&self.scorer).map(|_| ())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeedbackScores {
    pub rele: f64,
    /// `None` when no relevant excellent product is in `Z_x`.
    pub incr: Option<f64>,
    /// `None` when no transacted product is relevant.
    pub hitrate: Option<f64>,
}

impl FeedbackScores {
    pub fn incr_valid(&self) -> bool {
        self.incr.is_some()
    }

    pub fn hitrate_valid(&self) -> bool {
        self.hitrate.is_some()
    }

    pub fn get(&self, objective: Objective) -> Option<f64> {
        match objective {
            Objective::Rele => Some(self.rele),
            Objective::Incr => self.incr,
            Objective::Hitrate => self.hitrate,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Rele,
    Incr,
    Hitrate,
}

impl Objective {
    pub fn name(self) -> &'static str {
        match self {
            Objective::Rele => "rele",
            Objective::Incr => "incr",
            Objective::Hitrate => "hitrate",
        }
    }
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rele" => Ok(Objective::Rele),
            "incr" => Ok(Objective::Incr),
            "hitrate" => Ok(Objective::Hitrate),
            other => Err(Error::Config(format!("unknown objective {other:?}"))),
        }
    }
}

/// The offline search system: index, excellent set and relevance function.
pub struct OfflineFeedback<'a> {
    index: &'a InvertedIndex,
    excellent: RetrievalSet,
    scorer: &'a dyn RelevanceScorer,
    tau_prime: f64,
}

impl<'a> OfflineFeedback<'a> {
    pub fn new(index: &'a InvertedIndex, scorer: &'a dyn RelevanceScorer, tau_prime: f64) -> Self {
        OfflineFeedback {
            index,
            excellent: index.excellent_set(),
            scorer,
            tau_prime,
        }
    }

    pub fn index(&self) -> &InvertedIndex {
        self.index
    }

    pub fn scorer(&self) -> &dyn RelevanceScorer {
        self.scorer
    }

    pub fn tau_prime(&self) -> f64 {
        self.tau_prime
    }

    fn query_tokens(query: &str) -> Result<TokenList> {
        let q = tokenize(query);
        if q.is_empty() {
            return Err(Error::EmptyQuery);
        }
        Ok(q)
    }

    fn count_relevant(&self, q: &TokenList, set: impl Iterator<Item = u32>) -> usize {
        set.filter(|&d| self.scorer.score(q, self.index.title_tokens(d)) > self.tau_prime)
            .count()
    }

    pub fn rele(&self, query: &str, rewrite: &str) -> Result<f64> {
        let q = Self::query_tokens(query)?;
        let zy = self.index.retrieve(rewrite)?;
        Ok(self.rele_from(&q, &zy))
    }

    fn rele_from(&self, q: &TokenList, zy: &RetrievalSet) -> f64 {
        if zy.is_empty() {
            return 0.0;
        }
        self.count_relevant(q, zy.iter()) as f64 / zy.len() as f64
    }

    pub fn incr(&self, query: &str, rewrite: &str) -> Result<Option<f64>> {
        let q = Self::query_tokens(query)?;
        let zx = self.index.retrieve_tokens(&q)?;
        let zy = self.index.retrieve(rewrite)?;
        Ok(self.incr_from(&q, &zx, &zy))
    }

    fn incr_from(&self, q: &TokenList, zx: &RetrievalSet, zy: &RetrievalSet) -> Option<f64> {
        let den = self.count_relevant(q, self.excellent.intersect(zx).iter());
        if den == 0 {
            return None;
        }
        let num = self.count_relevant(q, self.excellent.intersect(&zx.union(zy)).iter());
        Some(num as f64 / den as f64)
    }

    pub fn hitrate(
        &self,
        query: &str,
        rewrite: &str,
        transactions: &RetrievalSet,
    ) -> Result<Option<f64>> {
        let q = Self::query_tokens(query)?;
        let zx = self.index.retrieve_tokens(&q)?;
        let zy = self.index.retrieve(rewrite)?;
        Ok(self.hitrate_from(&q, &zx, &zy, transactions))
    }

    fn hitrate_from(
        &self,
        q: &TokenList,
        zx: &RetrievalSet,
        zy: &RetrievalSet,
        transactions: &RetrievalSet,
    ) -> Option<f64> {
        let den = self.count_relevant(q, transactions.iter());
        if den == 0 {
            return None;
        }
        let num = transactions.intersect(&zx.union(zy)).len();
        Some(num as f64 / den as f64)
    }

    /// All three scores, retrieving each side once.
    pub fn scores(
        &self,
        query: &str,
        rewrite: &str,
        transactions: &RetrievalSet,
    ) -> Result<FeedbackScores> {
        let q = Self::query_tokens(query)?;
        let zx = self.index.retrieve_tokens(&q)?;
        let zy = self.index.retrieve(rewrite)?;
        Ok(FeedbackScores {
            rele: self.rele_from(&q, &zy),
            incr: self.incr_from(&q, &zx, &zy),
            hitrate: self.hitrate_from(&q, &zx, &zy, transactions),
        })
    }

    pub fn score(
        &self,
        objective: Objective,
        query: &str,
        rewrite: &str,
        transactions: &RetrievalSet,
    ) -> Result<Option<f64>> {
        match objective {
            Objective::Rele => self.rele(query, rewrite).map(Some),
            Objective::Incr => self.incr(query, rewrite),
            Objective::Hitrate => self.hitrate(query, rewrite, transactions),
        }
    }

    pub fn segment(&self, query: &str) -> Result<QuerySegment> {
        self.index.segment_query(query, self.scorer, self.tau_prime)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub rewrite: String,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedCandidates {
    pub query: String,
    /// Descending reward; ties broken by ascending rewrite text.
    pub entries: Vec<RankedEntry>,
}

/// One line of the scored-candidate file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoredCandidate {
    pub query: String,
    pub rewrite: String,
    pub objective: Objective,
    pub reward: Option<f64>,
    pub valid: bool,
}

/// Scores each candidate under `objective`, drops undefined scores and sorts
/// the survivors. Also returns every candidate's raw score record.
pub fn score_candidates(
    feedback: &OfflineFeedback<'_>,
    query: &str,
    candidates: &[String],
    objective: Objective,
    transactions: &RetrievalSet,
) -> Result<(RankedCandidates, Vec<ScoredCandidate>)> {
    let mut seen = HashSet::new();
    let mut scored = Vec::with_capacity(candidates.len());
    let mut entries = Vec::new();
    for c in candidates {
        if !seen.insert(c.as_str()) {
            continue;
        }
        let reward = if tokenize(c).is_empty() {
            None
        } else {
            feedback.score(objective, query, c, transactions)?
        };
        let reward = reward.filter(|r| r.is_finite());
        scored.push(ScoredCandidate {
            query: query.to_string(),
            rewrite: c.clone(),
            objective,
            reward,
            valid: reward.is_some(),
        });
        if let Some(r) = reward {
            entries.push(RankedEntry {
                rewrite: c.clone(),
                reward: r,
            });
        }
    }
    if entries.is_empty() {
        return Err(Error::NoScorableCandidates(query.to_string()));
    }
    sort_ranked(&mut entries);
    Ok((
        RankedCandidates {
            query: query.to_string(),
            entries,
        },
        scored,
    ))
}

pub fn sort_ranked(entries: &mut [RankedEntry]) {
    entries.sort_by(|a, b| {
        b.reward
            .total_cmp(&a.reward)
            .then_with(|| a.rewrite.cmp(&b.rewrite))
    });
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryEval {
    pub query: String,
    pub rewrite: String,
    pub segment: QuerySegment,
    pub scores: FeedbackScores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentRow {
    /// `Top`, `Torso`, `Tail` or `All`.
    pub segment: String,
    pub count: usize,
    pub rele: Option<f64>,
    pub incr: Option<f64>,
    pub incr_count: usize,
    pub hitrate: Option<f64>,
    pub hitrate_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<SegmentRow>,
    pub queries: Vec<QueryEval>,
}

impl EvalReport {
    pub fn row(&self, segment: &str) -> Option<&SegmentRow> {
        self.rows.iter().find(|r| r.segment == segment)
    }
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

fn aggregate(segment: &str, items: &[&QueryEval]) -> SegmentRow {
    let rele: Vec<f64> = items.iter().map(|q| q.scores.rele).collect();
    let incr: Vec<f64> = items.iter().filter_map(|q| q.scores.incr).collect();
    let hit: Vec<f64> = items.iter().filter_map(|q| q.scores.hitrate).collect();
    SegmentRow {
        segment: segment.to_string(),
        count: items.len(),
        rele: mean(&rele),
        incr: mean(&incr),
        incr_count: incr.len(),
        hitrate: mean(&hit),
        hitrate_count: hit.len(),
    }
}

/// Scores each `(record, rewrite)` pair and aggregates per query segment.
pub fn evaluate_report(
    feedback: &OfflineFeedback<'_>,
    outputs: &[(QueryLogRecord, String)],
) -> Result<EvalReport> {
    if outputs.is_empty() {
        return Err(Error::EmptyEvalSet);
    }
    let queries = outputs
        .par_iter()
        .map(|(rec, rewrite)| {
            let tx = feedback
                .index()
                .to_set(rec.transactions.iter().map(String::as_str));
            Ok(QueryEval {
                query: rec.query.clone(),
                rewrite: rewrite.clone(),
                segment: feedback.segment(&rec.query)?,
                scores: feedback.scores(&rec.query, rewrite, &tx)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::with_capacity(4);
    for seg in QuerySegment::ALL {
        let items: Vec<&QueryEval> = queries.iter().filter(|q| q.segment == seg).collect();
        rows.push(aggregate(seg.name(), &items));
    }
    let all: Vec<&QueryEval> = queries.iter().collect();
    rows.push(aggregate("All", &all));
    Ok(EvalReport { rows, queries })
}
