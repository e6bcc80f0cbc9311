//! Multi-instruction SFT data.
//!
//! Rewrite pairs start from the legacy rewriter's top suggestion, pass a
//! relevance filter (`rele > τ_rele`) and an increment filter
//! (`incr > τ_incr`), and are then rendered with the query's most recent
//! interacted titles. Quality classification, title prediction and
//! chain-of-thought examples are rendered from fixed templates and mixed in.

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, QueryLogRecord};
use crate::feedback::OfflineFeedback;
use crate::{Error, Result};

pub const TEMPLATE_VERSION: u32 = 1;

const REWRITE_HEAD: &str =
    "Please rewrite the input query into a query that retrieves more related products";
const QUALITY_HEAD: &str = "Is this a good e-commerce query rewrite?";
const TITLE_HEAD: &str = "Please generate product titles that match input query";
const COT_HEAD: &str = "Your task is to rewrite the input query into a query that makes it easier to search for related products, and you are required to give the thought process and then the query rewriting result. The thought process and the query rewriting result are separated by a semicolon.";
const SYSTEM: &str = "System:";

/// Maximum prompt length (in tokens) for rewrite prompts and for everything else.
pub const REWRITE_PROMPT_CAP: usize = 64;
pub const AUX_PROMPT_CAP: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Rewrite,
    Quality,
    Title,
    Cot,
}

impl Task {
    pub fn prompt_cap(self) -> usize {
        match self {
            Task::Rewrite => REWRITE_PROMPT_CAP,
            _ => AUX_PROMPT_CAP,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptExample {
    pub prompt: String,
    pub response: String,
    pub task: Task,
}

/// Annotation row for the quality-classification task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QualityRow {
    pub query: String,
    pub rewrite: String,
    pub label: String,
}

/// Annotation row for the chain-of-thought task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CotRow {
    pub query: String,
    pub thought: String,
    pub rewrite: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewritePair {
    pub query: String,
    pub rewrite: String,
    /// Interacted titles of the query, most recent first.
    pub context_titles: Vec<String>,
    pub rele: Option<f64>,
    pub incr: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    /// Pairs seeded from legacy rewrites.
    pub n_initial: usize,
    /// Log records with no legacy rewrite.
    pub n_skipped: usize,
    pub n_after_rele: usize,
    pub n_after_incr: usize,
    pub n_quality: usize,
    pub n_title: usize,
    pub n_cot: usize,
    pub n_total: usize,
}

fn check_field(name: &str, value: &str) -> Result<()> {
    if value.contains(['\n', '\r']) {
        return Err(Error::InvalidField(format!("{name} contains a line break")));
    }
    if tokenize(value).is_empty() {
        return Err(Error::InvalidField(format!("{name} has no tokens")));
    }
    Ok(())
}

pub fn render_rewrite_prompt(query: &str, titles: &[String]) -> Result<String> {
    check_field("query", query)?;
    let mut out = format!("{REWRITE_HEAD}\nQuery: {query}\n");
    for t in titles {
        check_field("title", t)?;
        out.push_str("Title: ");
        out.push_str(t);
        out.push('\n');
    }
    out.push_str(SYSTEM);
    Ok(out)
}

pub fn parse_rewrite_prompt(prompt: &str) -> Result<(String, Vec<String>)> {
    let mismatch = || Error::TemplateMismatch { task: "rewrite" };
    let mut lines = prompt.split('\n');
    if lines.next() != Some(REWRITE_HEAD) {
        return Err(mismatch());
    }
    let query = lines
        .next()
        .and_then(|l| l.strip_prefix("Query: "))
        .ok_or_else(mismatch)?
        .to_string();
    let mut titles = Vec::new();
    for line in lines.by_ref() {
        if line == SYSTEM {
            return match lines.next() {
                None => Ok((query, titles)),
                Some(_) => Err(mismatch()),
            };
        }
        titles.push(
            line.strip_prefix("Title: ")
                .ok_or_else(mismatch)?
                .to_string(),
        );
    }
    Err(mismatch())
}

pub fn render_quality_prompt(query: &str, rewrite: &str) -> Result<String> {
    check_field("query", query)?;
    check_field("rewrite", rewrite)?;
    Ok(format!(
        "{QUALITY_HEAD}\nQuery: {query}\nRewrite: {rewrite}\n{SYSTEM}"
    ))
}

pub fn parse_quality_prompt(prompt: &str) -> Result<(String, String)> {
    let mismatch = || Error::TemplateMismatch { task: "quality" };
    let lines: Vec<&str> = prompt.split('\n').collect();
    match lines.as_slice() {
        [head, q, r, sys] if *head == QUALITY_HEAD && *sys == SYSTEM => Ok((
            q.strip_prefix("Query: ").ok_or_else(mismatch)?.to_string(),
            r.strip_prefix("Rewrite: ")
                .ok_or_else(mismatch)?
                .to_string(),
        )),
        _ => Err(mismatch()),
    }
}

pub fn render_title_prompt(query: &str) -> Result<String> {
    check_field("query", query)?;
    Ok(format!("{TITLE_HEAD}\nQuery: {query}\n{SYSTEM}"))
}

pub fn parse_title_prompt(prompt: &str) -> Result<String> {
    parse_single_query(prompt, TITLE_HEAD, "title")
}

pub fn render_cot_prompt(query: &str) -> Result<String> {
    check_field("query", query)?;
    Ok(format!("{COT_HEAD}\nQuery: {query}\n{SYSTEM}"))
}

pub fn parse_cot_prompt(prompt: &str) -> Result<String> {
    parse_single_query(prompt, COT_HEAD, "cot")
}

fn parse_single_query(prompt: &str, head: &str, task: &'static str) -> Result<String> {
    let mismatch = || Error::TemplateMismatch { task };
    let lines: Vec<&str> = prompt.split('\n').collect();
    match lines.as_slice() {
        [h, q, sys] if *h == head && *sys == SYSTEM => {
            Ok(q.strip_prefix("Query: ").ok_or_else(mismatch)?.to_string())
        }
        _ => Err(mismatch()),
    }
}

/// `"{thought}; {rewrite}"`.
pub fn render_cot_response(thought: &str, rewrite: &str) -> Result<String> {
    if thought.contains(';') {
        return Err(Error::AmbiguousSeparator(thought.to_string()));
    }
    check_field("thought", thought)?;
    check_field("rewrite", rewrite)?;
    Ok(format!("{thought}; {rewrite}"))
}

/// Splits at the first semicolon.
pub fn parse_cot_response(response: &str) -> Option<(String, String)> {
    let (thought, rewrite) = response.split_once(';')?;
    Some((
        thought.to_string(),
        rewrite.strip_prefix(' ').unwrap_or(rewrite).to_string(),
    ))
}

/// Checks that `example.prompt` parses under its task's template.
pub fn matches_template(example: &PromptExample) -> bool {
    match example.task {
        Task::Rewrite => parse_rewrite_prompt(&example.prompt).is_ok(),
        Task::Quality => parse_quality_prompt(&example.prompt).is_ok(),
        Task::Title => parse_title_prompt(&example.prompt).is_ok(),
        Task::Cot => parse_cot_prompt(&example.prompt).is_ok(),
    }
}

/// One `(x, y1)` pair per record with a legacy rewrite; also returns the
/// number of records skipped.
pub fn build_initial_dataset(logs: &[QueryLogRecord]) -> (Vec<RewritePair>, usize) {
    let mut skipped = 0;
    let mut pairs = Vec::with_capacity(logs.len());
    for r in logs {
        match r.legacy_rewrites.first() {
            Some(y1) if !tokenize(y1).is_empty() && !tokenize(&r.query).is_empty() => {
                pairs.push(RewritePair {
                    query: r.query.clone(),
                    rewrite: y1.clone(),
                    context_titles: r.interacted_titles.clone(),
                    rele: None,
                    incr: None,
                })
            }
            _ => skipped += 1,
        }
    }
    (pairs, skipped)
}

/// Keeps pairs with `rele > tau_rele`.
pub fn filter_relevance(
    pairs: &[RewritePair],
    feedback: &OfflineFeedback<'_>,
    tau_rele: f64,
) -> Result<Vec<RewritePair>> {
    let scored = pairs
        .par_iter()
        .map(|p| {
            let rele = feedback.rele(&p.query, &p.rewrite)?;
            Ok((rele > tau_rele).then(|| RewritePair {
                rele: Some(rele),
                ..p.clone()
            }))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(scored.into_iter().flatten().collect())
}

/// Keeps pairs with a defined `incr > tau_incr`.
pub fn retain_increment(
    pairs: &[RewritePair],
    feedback: &OfflineFeedback<'_>,
    tau_incr: f64,
) -> Result<Vec<RewritePair>> {
    let scored = pairs
        .par_iter()
        .map(|p| {
            let incr = feedback.incr(&p.query, &p.rewrite)?;
            Ok(match incr {
                Some(v) if v > tau_incr => Some(RewritePair {
                    incr: Some(v),
                    ..p.clone()
                }),
                _ => None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(scored.into_iter().flatten().collect())
}

/// Renders a rewrite-task example with the `k_titles` most recent titles.
pub fn rewrite_example(pair: &RewritePair, k_titles: usize) -> Result<PromptExample> {
    let titles: Vec<String> = pair.context_titles.iter().take(k_titles).cloned().collect();
    Ok(PromptExample {
        prompt: render_rewrite_prompt(&pair.query, &titles)?,
        response: pair.rewrite.clone(),
        task: Task::Rewrite,
    })
}

pub fn filter_increment(
    pairs: &[RewritePair],
    feedback: &OfflineFeedback<'_>,
    tau_incr: f64,
    k_titles: usize,
) -> Result<Vec<PromptExample>> {
    retain_increment(pairs, feedback, tau_incr)?
        .iter()
        .map(|p| rewrite_example(p, k_titles))
        .collect()
}

pub fn build_aux_quality(rows: &[QualityRow]) -> Result<Vec<PromptExample>> {
    rows.iter()
        .map(|r| {
            let response = match r.label.trim().to_ascii_lowercase().as_str() {
                "yes" => "Yes",
                "no" => "No",
                _ => return Err(Error::UnknownLabel(r.label.clone())),
            };
            Ok(PromptExample {
                prompt: render_quality_prompt(&r.query, &r.rewrite)?,
                response: response.to_string(),
                task: Task::Quality,
            })
        })
        .collect()
}

/// One example per record that has an interacted title; the most recent
/// title is the target.
pub fn build_aux_title(records: &[QueryLogRecord]) -> Vec<PromptExample> {
    records
        .iter()
        .filter_map(|r| {
            let title = r.interacted_titles.first()?;
            if tokenize(title).is_empty() {
                return None;
            }
            Some(PromptExample {
                prompt: render_title_prompt(&r.query).ok()?,
                response: title.clone(),
                task: Task::Title,
            })
        })
        .collect()
}

pub fn build_aux_cot(rows: &[CotRow]) -> Result<Vec<PromptExample>> {
    rows.iter()
        .map(|r| {
            Ok(PromptExample {
                prompt: render_cot_prompt(&r.query)?,
                response: render_cot_response(&r.thought, &r.rewrite)?,
                task: Task::Cot,
            })
        })
        .collect()
}

/// Concatenates the task datasets and applies a seeded uniform permutation.
pub fn mix_and_shuffle(datasets: Vec<Vec<PromptExample>>, seed: u64) -> Vec<PromptExample> {
    let mut all: Vec<PromptExample> = datasets.into_iter().flatten().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    all.shuffle(&mut rng);
    all
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub tau_rele: f64,
    pub tau_incr: f64,
    /// How many interacted titles to append to rewrite prompts.
    pub k_titles: usize,
    /// Per auxiliary task, at most this fraction of the rewrite set size.
    pub aux_ratio: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            tau_rele: 0.6,
            tau_incr: 1.2,
            k_titles: 1,
            // 50k per auxiliary task against ~575k rewrite rows.
            aux_ratio: 0.087,
            seed: 0,
        }
    }
}

pub struct BuiltDataset {
    pub examples: Vec<PromptExample>,
    /// Rewrite pairs that survived both filters.
    pub survivors: Vec<RewritePair>,
    pub stats: DatasetStats,
}

fn subsample(mut xs: Vec<PromptExample>, cap: usize, rng: &mut ChaCha8Rng) -> Vec<PromptExample> {
    if xs.len() > cap {
        xs.shuffle(rng);
        xs.truncate(cap);
    }
    xs
}

/// Full dataset construction: initial pairs, both rejection filters,
/// auxiliary tasks capped by `aux_ratio`, and the final shuffle.
pub fn build_dataset(
    logs: &[QueryLogRecord],
    quality: &[QualityRow],
    cot: &[CotRow],
    feedback: &OfflineFeedback<'_>,
    cfg: &DatasetConfig,
) -> Result<BuiltDataset> {
    let (initial, skipped) = build_initial_dataset(logs);
    let after_rele = filter_relevance(&initial, feedback, cfg.tau_rele)?;
    let survivors = retain_increment(&after_rele, feedback, cfg.tau_incr)?;
    let rewrite = survivors
        .iter()
        .map(|p| rewrite_example(p, cfg.k_titles))
        .collect::<Result<Vec<_>>>()?;

    let cap = if cfg.aux_ratio > 0.0 {
        ((cfg.aux_ratio * rewrite.len() as f64).round() as usize).max(1)
    } else {
        0
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_a0c5);
    let q = subsample(build_aux_quality(quality)?, cap, &mut rng);
    let t = subsample(build_aux_title(logs), cap, &mut rng);
    let c = subsample(build_aux_cot(cot)?, cap, &mut rng);

    let stats = DatasetStats {
        n_initial: initial.len(),
        n_skipped: skipped,
        n_after_rele: after_rele.len(),
        n_after_incr: survivors.len(),
        n_quality: q.len(),
        n_title: t.len(),
        n_cot: c.len(),
        n_total: rewrite.len() + q.len() + t.len() + c.len(),
    };
    Ok(BuiltDataset {
        examples: mix_and_shuffle(vec![rewrite, q, t, c], cfg.seed),
        survivors,
        stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic_world, Catalog, Product};
    use crate::feedback::TokenOverlap;
    use crate::lexindex::build_index;
    use proptest::prelude::*;

    fn record(q: &str, legacy: &[&str], titles: &[&str]) -> QueryLogRecord {
        QueryLogRecord {
            query: q.into(),
            legacy_rewrites: legacy.iter().map(|s| s.to_string()).collect(),
            interacted_titles: titles.iter().map(|s| s.to_string()).collect(),
            transactions: vec![],
        }
    }

    #[test]
    fn initial_dataset_takes_top_rewrite() {
        let (pairs, skipped) =
            build_initial_dataset(&[record("x", &["a", "b", "c"], &[]), record("z", &[], &[])]);
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].rewrite, "a");
        assert_eq!(skipped, 1);
    }

    #[test]
    fn initial_dataset_counts_by_construction() {
        let logs: Vec<QueryLogRecord> = (0..20)
            .map(|i| {
                if i % 7 == 3 {
                    record(&format!("q{i}"), &[], &[])
                } else {
                    record(&format!("q{i}"), &["r"], &[])
                }
            })
            .collect();
        let (pairs, skipped) = build_initial_dataset(&logs);
        assert_eq!((pairs.len(), skipped), (17, 3));
    }

    fn pair(q: &str, r: &str) -> RewritePair {
        RewritePair {
            query: q.into(),
            rewrite: r.into(),
            context_titles: vec!["red dress cotton".into(), "older title".into()],
            rele: None,
            incr: None,
        }
    }

    #[test]
    fn relevance_filter_is_strict() {
        let cat = Catalog::new(vec![
            Product {
                id: "a".into(),
                title: "red dress".into(),
                excellent: true,
            },
            Product {
                id: "b".into(),
                title: "blue dress".into(),
                excellent: false,
            },
        ])
        .unwrap();
        let idx = build_index(&cat);
        let fb = OfflineFeedback::new(&idx, &TokenOverlap, 0.5);
        // rele("red dress", "dress") = 0.5 exactly.
        let kept = filter_relevance(&[pair("red dress", "dress")], &fb, 0.5).unwrap();
        assert!(kept.is_empty());
        let kept = filter_relevance(&[pair("red dress", "red")], &fb, 0.6).unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].rele, Some(1.0));
    }

    #[test]
    fn increment_filter_embeds_titles() {
        let cat = Catalog::new(
            [
                ("a1", "lamp desk", true),
                ("a2", "lamp desk steel", true),
                ("b1", "lamp reading", true),
                ("b2", "lamp reading wood", true),
            ]
            .iter()
            .map(|(id, t, e)| Product {
                id: id.to_string(),
                title: t.to_string(),
                excellent: *e,
            })
            .collect(),
        )
        .unwrap();
        let idx = build_index(&cat);
        let fb = OfflineFeedback::new(&idx, &TokenOverlap, 0.4);
        // incr("lamp desk", "lamp") = 4/2.
        let out = filter_increment(&[pair("lamp desk", "lamp")], &fb, 1.2, 1).unwrap();
        assert_eq!(out.len(), 1);
        let (q, titles) = parse_rewrite_prompt(&out[0].prompt).unwrap();
        assert_eq!(q, "lamp desk");
        assert_eq!(titles, ["red dress cotton"]);
        assert_eq!(out[0].response, "lamp");
        // Z_x ∩ Z_e has nothing relevant.
        assert!(filter_increment(&[pair("chair", "lamp")], &fb, 1.2, 1)
            .unwrap()
            .is_empty());
        let two = filter_increment(&[pair("lamp desk", "lamp")], &fb, 1.2, 2).unwrap();
        assert_eq!(parse_rewrite_prompt(&two[0].prompt).unwrap().1.len(), 2);
    }

    #[test]
    fn quality_examples() {
        let rows = vec![QualityRow {
            query: "red dress".into(),
            rewrite: "red skirt".into(),
            label: "yes".into(),
        }];
        let ex = build_aux_quality(&rows).unwrap();
        assert_eq!(ex[0].response, "Yes");
        assert!(ex[0]
            .prompt
            .starts_with("Is this a good e-commerce query rewrite?"));
        assert_eq!(
            parse_quality_prompt(&ex[0].prompt).unwrap(),
            ("red dress".to_string(), "red skirt".to_string())
        );
        let bad = vec![QualityRow {
            label: "maybe".into(),
            ..rows[0].clone()
        }];
        assert!(matches!(
            build_aux_quality(&bad),
            Err(Error::UnknownLabel(_))
        ));
    }

    #[test]
    fn title_examples() {
        let ex = build_aux_title(&[record("q", &[], &["t1", "t2"]), record("p", &[], &[])]);
        assert_eq!(ex.len(), 1);
        assert_eq!(ex[0].response, "t1");
        assert_eq!(parse_title_prompt(&ex[0].prompt).unwrap(), "q");

        let recs: Vec<QueryLogRecord> = (0..50)
            .map(|i| {
                if i % 5 == 0 {
                    record("q", &[], &[])
                } else {
                    record("q", &[], &["t"])
                }
            })
            .collect();
        assert_eq!(build_aux_title(&recs).len(), 40);
    }

    #[test]
    fn cot_examples() {
        let rows = vec![CotRow {
            query: "q".into(),
            thought: "expand brand synonym".into(),
            rewrite: "r".into(),
        }];
        let ex = build_aux_cot(&rows).unwrap();
        assert_eq!(ex[0].response, "expand brand synonym; r");
        assert_eq!(
            parse_cot_response(&ex[0].response).unwrap(),
            ("expand brand synonym".to_string(), "r".to_string())
        );
        let bad = vec![CotRow {
            thought: "a;b".into(),
            ..rows[0].clone()
        }];
        assert!(matches!(
            build_aux_cot(&bad),
            Err(Error::AmbiguousSeparator(_))
        ));
    }

    #[test]
    fn shuffle_is_seeded_permutation() {
        let xs: Vec<PromptExample> = (0..100)
            .map(|i| PromptExample {
                prompt: format!("p{i}"),
                response: "r".into(),
                task: Task::Title,
            })
            .collect();
        let a = mix_and_shuffle(vec![xs.clone()], 1);
        let b = mix_and_shuffle(vec![xs.clone()], 1);
        let c = mix_and_shuffle(vec![xs.clone()], 2);
        assert_eq!(a, b);
        assert_ne!(a, c);
        let sorted = |mut v: Vec<PromptExample>| {
            v.sort();
            v
        };
        assert_eq!(sorted(a.clone()), sorted(xs.clone()));
        assert_eq!(sorted(c), sorted(xs));
    }

    #[test]
    fn synthetic_dataset_survivors_rescore() {
        let w = generate_synthetic_world(2, 150, 200, 60);
        let idx = build_index(&w.catalog);
        let fb = OfflineFeedback::new(&idx, &TokenOverlap, 0.5);
        let cfg = DatasetConfig::default();
        let built = build_dataset(&w.logs, &w.quality, &w.cot, &fb, &cfg).unwrap();
        let s = &built.stats;
        assert!(s.n_initial >= s.n_after_rele && s.n_after_rele >= s.n_after_incr);
        assert_eq!(s.n_initial + s.n_skipped, w.logs.len());
        assert_eq!(built.examples.len(), s.n_total);
        for p in &built.survivors {
            assert!(fb.rele(&p.query, &p.rewrite).unwrap() > cfg.tau_rele);
            assert!(fb.incr(&p.query, &p.rewrite).unwrap().unwrap() > cfg.tau_incr);
        }
        assert!(built.examples.iter().all(matches_template));
    }

    proptest! {
        #[test]
        fn templates_round_trip(q in "[a-z]{1,8}( [a-z]{1,8}){0,3}",
                                r in "[a-z]{1,8}( [a-z0-9]{1,8}){0,3}",
                                titles in proptest::collection::vec("[a-z]{1,6}( [a-z]{1,6}){0,4}", 0..4)) {
            let p = render_quality_prompt(&q, &r).unwrap();
            prop_assert_eq!(parse_quality_prompt(&p).unwrap(), (q.clone(), r.clone()));
            let p = render_rewrite_prompt(&q, &titles).unwrap();
            prop_assert_eq!(parse_rewrite_prompt(&p).unwrap(), (q.clone(), titles.clone()));
            prop_assert_eq!(parse_title_prompt(&render_title_prompt(&q).unwrap()).unwrap(), q.clone());
            prop_assert_eq!(parse_cot_prompt(&render_cot_prompt(&q).unwrap()).unwrap(), q.clone());
            let resp = render_cot_response(&q, &r).unwrap();
            prop_assert_eq!(parse_cot_response(&resp).unwrap(), (q, r));
        }
    }
}
