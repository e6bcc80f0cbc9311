//! Deterministic synthetic worlds.
//!
//! Titles are drawn from a Zipf-weighted syllable vocabulary. A fraction of
//! words get a colloquial alias that only rarely shows up in titles, so
//! queries using the alias fall into the few-recall regime. The legacy
//! rewriter is simulated with scripted perturbations (alias canonicalization,
//! token drop, alias swap, random substitution).

use std::collections::HashSet;
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{load_catalog, load_logs, save_catalog, save_logs, Catalog, Product, QueryLogRecord};
use crate::datasetgen::{CotRow, QualityRow};
use crate::{jsonl, Result};

pub const PRODUCTS_FILE: &str = "products.jsonl";
pub const LOGS_FILE: &str = "logs.jsonl";
pub const EVAL_FILE: &str = "eval.jsonl";
pub const QUALITY_FILE: &str = "quality.jsonl";
pub const COT_FILE: &str = "cot.jsonl";

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_products: usize,
    pub n_queries: usize,
    /// Held-out evaluation queries.
    pub n_eval: usize,
    pub vocab_size: usize,
    pub excellent_fraction: f64,
    /// Fraction of vocabulary words that own a colloquial alias.
    pub alias_fraction: f64,
    /// Probability that a title uses the alias instead of the word.
    pub title_alias_prob: f64,
    /// Probability that a query uses the alias instead of the word.
    pub query_alias_prob: f64,
    pub empty_legacy_fraction: f64,
    /// Rows per annotation file (quality and CoT).
    pub n_annotations: usize,
}

impl SynthConfig {
    pub fn new(seed: u64, n_products: usize, n_queries: usize, vocab_size: usize) -> Self {
        SynthConfig {
            seed,
            n_products,
            n_queries,
            n_eval: n_queries.div_ceil(4),
            vocab_size,
            excellent_fraction: 0.5,
            alias_fraction: 0.4,
            title_alias_prob: 0.1,
            query_alias_prob: 0.25,
            empty_legacy_fraction: 0.15,
            n_annotations: n_queries.div_ceil(2),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub catalog: Catalog,
    pub logs: Vec<QueryLogRecord>,
    pub eval: Vec<QueryLogRecord>,
    pub quality: Vec<QualityRow>,
    pub cot: Vec<CotRow>,
}

impl World {
    pub fn save(&self, dir: &Path) -> Result<()> {
        save_catalog(&dir.join(PRODUCTS_FILE), &self.catalog)?;
        save_logs(&dir.join(LOGS_FILE), &self.logs)?;
        save_logs(&dir.join(EVAL_FILE), &self.eval)?;
        jsonl::write(&dir.join(QUALITY_FILE), &self.quality)?;
        jsonl::write(&dir.join(COT_FILE), &self.cot)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let catalog = load_catalog(&dir.join(PRODUCTS_FILE))?;
        let logs = load_logs(&dir.join(LOGS_FILE), &catalog)?;
        let eval = load_logs(&dir.join(EVAL_FILE), &catalog)?;
        Ok(World {
            catalog,
            logs,
            eval,
            quality: jsonl::read(&dir.join(QUALITY_FILE))?,
            cot: jsonl::read(&dir.join(COT_FILE))?,
        })
    }
}

/// Generates a world with default knobs for the given sizes.
pub fn generate_synthetic_world(
    seed: u64,
    n_products: usize,
    n_queries: usize,
    vocab_size: usize,
) -> World {
    Generator::new(&SynthConfig::new(seed, n_products, n_queries, vocab_size)).run()
}

impl SynthConfig {
    pub fn generate(&self) -> World {
        Generator::new(self).run()
    }
}

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

struct WordFactory {
    used: HashSet<String>,
}

impl WordFactory {
    fn fresh(&mut self, rng: &mut ChaCha8Rng, syllables: usize) -> String {
        let mut n = syllables;
        let mut misses = 0;
        loop {
            let mut w = String::with_capacity(2 * n);
            for _ in 0..n {
                w.push(*CONSONANTS.choose(rng).unwrap() as char);
                w.push(*VOWELS.choose(rng).unwrap() as char);
            }
            if self.used.insert(w.clone()) {
                return w;
            }
            misses += 1;
            if misses > 64 {
                n += 1;
                misses = 0;
            }
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Perturbation {
    Canonicalize,
    Drop,
    AliasSwap,
    Noise,
}

struct SynthProduct {
    words: Vec<usize>,
    literal: Vec<String>,
}

struct Generator<'a> {
    cfg: &'a SynthConfig,
    rng: ChaCha8Rng,
    words: Vec<String>,
    aliases: Vec<Option<String>>,
    products: Vec<SynthProduct>,
    /// word index → products whose title carries that word (either form)
    by_word: Vec<Vec<usize>>,
}

struct QueryDraft {
    /// (word index, surface form)
    tokens: Vec<(usize, String)>,
    source: usize,
}

impl QueryDraft {
    fn text(&self) -> String {
        self.tokens
            .iter()
            .map(|(_, s)| s.as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// (query, rewrite, how the rewrite was made, query tokens).
type LegacyDraft = (String, String, Perturbation, Vec<(usize, String)>);

impl<'a> Generator<'a> {
    fn new(cfg: &'a SynthConfig) -> Self {
        Generator {
            cfg,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            words: Vec::new(),
            aliases: Vec::new(),
            products: Vec::new(),
            by_word: Vec::new(),
        }
    }

    fn run(mut self) -> World {
        self.make_vocabulary();
        self.make_products();

        let catalog_products: Vec<Product> = self
            .products
            .iter()
            .enumerate()
            .map(|(i, p)| Product {
                id: product_id(i, self.cfg.n_products),
                title: p.literal.join(" "),
                excellent: false,
            })
            .collect();
        let mut catalog_products = catalog_products;
        for p in catalog_products.iter_mut() {
            p.excellent = self
                .rng
                .gen_bool(self.cfg.excellent_fraction.clamp(0.0, 1.0));
        }

        let mut logs = Vec::with_capacity(self.cfg.n_queries);
        let mut rewrites_with_kind = Vec::new();
        for _ in 0..self.cfg.n_queries {
            let draft = self.draft_query();
            let (record, kinds) = self.make_record(&draft, &catalog_products);
            for (rw, kind) in record.legacy_rewrites.iter().zip(kinds) {
                rewrites_with_kind.push((draft.text(), rw.clone(), kind, draft.tokens.clone()));
            }
            logs.push(record);
        }

        let seen: HashSet<String> = logs.iter().map(|r| r.query.clone()).collect();
        let mut eval = Vec::with_capacity(self.cfg.n_eval);
        let mut eval_seen = HashSet::new();
        for _ in 0..self.cfg.n_eval {
            let mut draft = self.draft_query();
            for _ in 0..20 {
                let t = draft.text();
                if !seen.contains(&t) && !eval_seen.contains(&t) {
                    break;
                }
                draft = self.draft_query();
            }
            eval_seen.insert(draft.text());
            let (record, _) = self.make_record(&draft, &catalog_products);
            eval.push(record);
        }

        let (quality, cot) = self.make_annotations(&rewrites_with_kind);
        let catalog = Catalog::new(catalog_products).expect("generator emits a valid catalog");
        World {
            catalog,
            logs,
            eval,
            quality,
            cot,
        }
    }

    fn make_vocabulary(&mut self) {
        let mut factory = WordFactory {
            used: HashSet::new(),
        };
        let n = self.cfg.vocab_size.max(1);
        for _ in 0..n {
            let w = factory.fresh(&mut self.rng, 2);
            self.words.push(w);
        }
        for _ in 0..n {
            let alias = if self.rng.gen_bool(self.cfg.alias_fraction.clamp(0.0, 1.0)) {
                Some(factory.fresh(&mut self.rng, 3))
            } else {
                None
            };
            self.aliases.push(alias);
        }
        self.by_word = vec![Vec::new(); n];
    }

    fn make_products(&mut self) {
        let n_words = self.words.len();
        let weights: Vec<f64> = (0..n_words)
            .map(|r| 1.0 / ((r + 1) as f64).powf(0.8))
            .collect();
        let zipf = WeightedIndex::new(&weights).expect("positive weights");
        // Products cluster into categories: a head word plus a small pool of
        // attribute words, so sibling products overlap heavily.
        let n_cat = (n_words / 8).max(1);
        let mut categories: Vec<(usize, Vec<usize>)> = Vec::with_capacity(n_cat);
        for c in 0..n_cat {
            let head = (c * 8) % n_words;
            let mut pool = Vec::new();
            for _ in 0..40 {
                if pool.len() >= 9 {
                    break;
                }
                let w = zipf.sample(&mut self.rng);
                if w != head && !pool.contains(&w) {
                    pool.push(w);
                }
            }
            categories.push((head, pool));
        }
        for pi in 0..self.cfg.n_products.max(1) {
            let (head, pool) = categories.choose(&mut self.rng).expect("non-empty").clone();
            let len = self.rng.gen_range(2..=5).min(pool.len());
            let mut words = vec![head];
            // Attributes come from the front of the pool, the category's
            // common vocabulary.
            let front = &pool[..pool.len().min(len + 2)];
            let attrs: Vec<usize> = front.choose_multiple(&mut self.rng, len).copied().collect();
            words.extend(attrs);
            let literal = words
                .iter()
                .map(|&w| match &self.aliases[w] {
                    Some(a) if self.rng.gen_bool(self.cfg.title_alias_prob.clamp(0.0, 1.0)) => {
                        a.clone()
                    }
                    _ => self.words[w].clone(),
                })
                .collect();
            for &w in &words {
                self.by_word[w].push(pi);
            }
            self.products.push(SynthProduct { words, literal });
        }
    }

    fn draft_query(&mut self) -> QueryDraft {
        let source = self.rng.gen_range(0..self.products.len());
        let title_len = self.products[source].words.len();
        let m = match self.rng.gen_range(0..10) {
            0 => 1,
            1..=3 => 2,
            4..=7 => 3,
            _ => 4,
        }
        .min(title_len);
        let mut positions: Vec<usize> = (0..title_len).collect();
        positions.shuffle(&mut self.rng);
        positions.truncate(m);
        positions.sort_unstable();

        let mut tokens: Vec<(usize, String)> = positions
            .iter()
            .map(|&pos| {
                let w = self.products[source].words[pos];
                let surface = match &self.aliases[w] {
                    Some(a) if self.rng.gen_bool(self.cfg.query_alias_prob.clamp(0.0, 1.0)) => {
                        a.clone()
                    }
                    _ => self.words[w].clone(),
                };
                (w, surface)
            })
            .collect();

        let literal = &self.products[source].literal;
        if !tokens.iter().any(|(_, s)| literal.contains(s)) {
            tokens[0].1 = literal[positions[0]].clone();
        }
        QueryDraft { tokens, source }
    }

    fn perturb(&mut self, draft: &QueryDraft, kind: Perturbation) -> Option<String> {
        let mut toks = draft.tokens.clone();
        match kind {
            Perturbation::Canonicalize => {
                let mut changed = false;
                for (w, s) in toks.iter_mut() {
                    if *s != self.words[*w] {
                        *s = self.words[*w].clone();
                        changed = true;
                    }
                }
                if !changed {
                    return None;
                }
            }
            Perturbation::Drop => {
                if toks.len() < 2 {
                    return None;
                }
                let i = self.rng.gen_range(0..toks.len());
                toks.remove(i);
            }
            Perturbation::AliasSwap => {
                let swappable: Vec<usize> = (0..toks.len())
                    .filter(|&i| {
                        let (w, s) = &toks[i];
                        self.aliases[*w].is_some() && *s == self.words[*w]
                    })
                    .collect();
                let &i = swappable.choose(&mut self.rng)?;
                let w = toks[i].0;
                toks[i].1 = self.aliases[w].clone().unwrap();
            }
            Perturbation::Noise => {
                let i = self.rng.gen_range(0..toks.len());
                let w = self.rng.gen_range(0..self.words.len());
                toks[i] = (w, self.words[w].clone());
            }
        }
        let text = toks
            .iter()
            .map(|(_, s)| s.as_str())
            .collect::<Vec<_>>()
            .join(" ");
        (text != draft.text()).then_some(text)
    }

    fn make_record(
        &mut self,
        draft: &QueryDraft,
        catalog: &[Product],
    ) -> (QueryLogRecord, Vec<Perturbation>) {
        let mut legacy = Vec::new();
        let mut kinds = Vec::new();
        if !self
            .rng
            .gen_bool(self.cfg.empty_legacy_fraction.clamp(0.0, 1.0))
        {
            let want = self.rng.gen_range(1..=3);
            for _ in 0..want * 4 {
                if legacy.len() == want {
                    break;
                }
                let kind = match self.rng.gen_range(0..20) {
                    0..=6 => Perturbation::Canonicalize,
                    7..=13 => Perturbation::Drop,
                    14..=15 => Perturbation::AliasSwap,
                    _ => Perturbation::Noise,
                };
                if let Some(rw) = self.perturb(draft, kind) {
                    if !legacy.contains(&rw) {
                        legacy.push(rw);
                        kinds.push(kind);
                    }
                }
            }
            if legacy.is_empty() {
                // Single-token query with nothing to canonicalize.
                let mut rw = None;
                for _ in 0..8 {
                    rw = self.perturb(draft, Perturbation::Noise);
                    if rw.is_some() {
                        break;
                    }
                }
                if let Some(rw) = rw {
                    legacy.push(rw);
                    kinds.push(Perturbation::Noise);
                }
            }
        }

        let mut related: Vec<usize> = Vec::new();
        for (w, _) in &draft.tokens {
            for &p in &self.by_word[*w] {
                if !related.contains(&p) {
                    related.push(p);
                }
            }
        }

        let mut titles = vec![catalog[draft.source].title.clone()];
        let extra = self.rng.gen_range(0..=2);
        for _ in 0..extra {
            if let Some(&p) = related.choose(&mut self.rng) {
                let t = catalog[p].title.clone();
                if !titles.contains(&t) {
                    titles.push(t);
                }
            }
        }

        let mut transactions: Vec<String> = Vec::new();
        if self.rng.gen_bool(0.7) {
            let n = self.rng.gen_range(1..=3);
            for _ in 0..n {
                let p = if self.rng.gen_bool(0.2) {
                    self.rng.gen_range(0..catalog.len())
                } else {
                    *related.choose(&mut self.rng).unwrap_or(&draft.source)
                };
                let id = catalog[p].id.clone();
                if !transactions.contains(&id) {
                    transactions.push(id);
                }
            }
        }

        let record = QueryLogRecord {
            query: draft.text(),
            legacy_rewrites: legacy,
            interacted_titles: titles,
            transactions,
        };
        (record, kinds)
    }

    fn make_annotations(&mut self, pool: &[LegacyDraft]) -> (Vec<QualityRow>, Vec<CotRow>) {
        let mut quality = Vec::new();
        let mut cot = Vec::new();
        if pool.is_empty() {
            return (quality, cot);
        }
        for _ in 0..self.cfg.n_annotations {
            let (q, rw, kind, _) = pool.choose(&mut self.rng).unwrap();
            let good = matches!(kind, Perturbation::Canonicalize | Perturbation::Drop);
            quality.push(QualityRow {
                query: q.clone(),
                rewrite: rw.clone(),
                label: if good { "yes" } else { "no" }.to_string(),
            });
        }
        let good: Vec<_> = pool
            .iter()
            .filter(|(_, _, k, _)| matches!(k, Perturbation::Canonicalize | Perturbation::Drop))
            .collect();
        if good.is_empty() {
            return (quality, cot);
        }
        for _ in 0..self.cfg.n_annotations {
            let (q, rw, kind, toks) = *good.choose(&mut self.rng).unwrap();
            let thought = match kind {
                Perturbation::Canonicalize => {
                    let swaps: Vec<String> = toks
                        .iter()
                        .filter(|(w, s)| *s != self.words[*w])
                        .map(|(w, s)| format!("replace {} with {}", s, self.words[*w]))
                        .collect();
                    swaps.join(" and ")
                }
                _ => {
                    let kept: HashSet<&str> = rw.split(' ').collect();
                    let dropped: Vec<&str> = toks
                        .iter()
                        .map(|(_, s)| s.as_str())
                        .filter(|s| !kept.contains(s))
                        .collect();
                    format!("drop {} to broaden the match", dropped.join(" "))
                }
            };
            cot.push(CotRow {
                query: q.clone(),
                thought,
                rewrite: rw.clone(),
            });
        }
        (quality, cot)
    }
}

fn product_id(i: usize, n: usize) -> String {
    let width = n.max(1).to_string().len();
    format!("p{:0width$}", i, width = width)
}
