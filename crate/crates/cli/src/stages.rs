use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use qrw_core::alignment::{
    encode_record, list_taus, load_records, save_records, train_align, AlignmentRecord,
    AlignmentSample,
};
use qrw_core::corpus::{
    load_catalog, load_logs, normalize, tokenize, QueryLogRecord, SynthConfig, World, COT_FILE,
    EVAL_FILE, LOGS_FILE, PRODUCTS_FILE, QUALITY_FILE,
};
use qrw_core::datasetgen::{
    build_dataset, render_rewrite_prompt, CotRow, PromptExample, QualityRow, REWRITE_PROMPT_CAP,
};
use qrw_core::feedback::{
    evaluate_report, score_candidates, scorer_by_name, OfflineFeedback, ScoredCandidate,
};
use qrw_core::lexindex::{build_index, InvertedIndex, RetrievalSet};
use qrw_core::model::{
    beam_search, build_vocab, checkpoint, encode_example, train_sft, ModelParams, Vocabulary,
};
use qrw_core::serving::{
    build_rewrite_table, rewrite_prompt_ids, serve_retrieve, timestamp_now, RewriteTable,
    ServeRecord, TableQuery,
};
use qrw_core::{jsonl, Error};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::manifest::{RunManifest, StageRecord};
use crate::report::render_report;
use crate::{PipelineConfig, StageError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    GenWorld,
    BuildIndex,
    BuildDataset,
    TrainSft,
    GenCandidates,
    ScoreFeedback,
    TrainAlign,
    BuildTable,
    Serve,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 10] = [
        Stage::GenWorld,
        Stage::BuildIndex,
        Stage::BuildDataset,
        Stage::TrainSft,
        Stage::GenCandidates,
        Stage::ScoreFeedback,
        Stage::TrainAlign,
        Stage::BuildTable,
        Stage::Serve,
        Stage::Eval,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::GenWorld => "gen-world",
            Stage::BuildIndex => "build-index",
            Stage::BuildDataset => "build-dataset",
            Stage::TrainSft => "train-sft",
            Stage::GenCandidates => "gen-candidates",
            Stage::ScoreFeedback => "score-feedback",
            Stage::TrainAlign => "train-align",
            Stage::BuildTable => "build-table",
            Stage::Serve => "serve",
            Stage::Eval => "eval",
        }
    }

    /// Files the stage reads, in the order they are checked.
    pub fn inputs(self, p: &Paths) -> Vec<PathBuf> {
        match self {
            Stage::GenWorld => vec![],
            Stage::BuildIndex => vec![p.world(PRODUCTS_FILE)],
            Stage::BuildDataset => vec![
                p.index.clone(),
                p.world(PRODUCTS_FILE),
                p.world(LOGS_FILE),
                p.world(QUALITY_FILE),
                p.world(COT_FILE),
            ],
            Stage::TrainSft => vec![p.dataset.clone(), p.vocab.clone()],
            Stage::GenCandidates => vec![
                p.sft_ckpt.clone(),
                p.vocab.clone(),
                p.world(PRODUCTS_FILE),
                p.world(LOGS_FILE),
            ],
            Stage::ScoreFeedback => vec![
                p.candidates.clone(),
                p.index.clone(),
                p.world(PRODUCTS_FILE),
                p.world(LOGS_FILE),
            ],
            Stage::TrainAlign => vec![p.alignment.clone(), p.sft_ckpt.clone(), p.vocab.clone()],
            Stage::BuildTable => vec![
                p.align_ckpt.clone(),
                p.vocab.clone(),
                p.index.clone(),
                p.world(PRODUCTS_FILE),
                p.world(EVAL_FILE),
            ],
            Stage::Serve => vec![p.table.clone(), p.index.clone(), p.world(PRODUCTS_FILE)],
            Stage::Eval => vec![
                p.index.clone(),
                p.align_ckpt.clone(),
                p.vocab.clone(),
                p.world(PRODUCTS_FILE),
                p.world(EVAL_FILE),
            ],
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = StageError;

    fn from_str(s: &str) -> Result<Self, StageError> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| StageError::validation(format!("unknown stage `{s}`")))
    }
}

/// Artifact locations under the run directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Paths {
    pub root: PathBuf,
    pub world_dir: PathBuf,
    pub index: PathBuf,
    pub dataset: PathBuf,
    pub survivors: PathBuf,
    pub vocab: PathBuf,
    pub sft_ckpt: PathBuf,
    pub sft_trace: PathBuf,
    pub candidates: PathBuf,
    pub scored: PathBuf,
    pub alignment: PathBuf,
    pub align_ckpt: PathBuf,
    pub align_trace: PathBuf,
    pub align_eval: PathBuf,
    pub table: PathBuf,
    pub serve_out: PathBuf,
    pub report_json: PathBuf,
    pub report_txt: PathBuf,
    pub eval_rewrites: PathBuf,
    pub manifest: PathBuf,
}

impl Paths {
    pub fn new(root: &Path) -> Self {
        let f = |name: &str| root.join(name);
        Paths {
            root: root.to_path_buf(),
            world_dir: f("world"),
            index: f("index.jsonl"),
            dataset: f("dataset.jsonl"),
            survivors: f("survivors.jsonl"),
            vocab: f("vocab.json"),
            sft_ckpt: f("sft.ckpt"),
            sft_trace: f("sft_trace.jsonl"),
            candidates: f("candidates.jsonl"),
            scored: f("scored.jsonl"),
            alignment: f("alignment.jsonl"),
            align_ckpt: f("align.ckpt"),
            align_trace: f("align_trace.jsonl"),
            align_eval: f("align_eval.json"),
            table: f("table.jsonl"),
            serve_out: f("serve.jsonl"),
            report_json: f("report.json"),
            report_txt: f("report.txt"),
            eval_rewrites: f("eval_rewrites.jsonl"),
            manifest: f("manifest.json"),
        }
    }

    pub fn world(&self, file: &str) -> PathBuf {
        self.world_dir.join(file)
    }

    fn rel(&self, p: &Path) -> String {
        p.strip_prefix(&self.root)
            .unwrap_or(p)
            .to_string_lossy()
            .replace('\\', "/")
    }
}

/// One line of the candidate file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidateRecord {
    pub query: String,
    pub prompt: String,
    pub candidates: Vec<GeneratedCandidate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratedCandidate {
    pub text: String,
    pub score: f64,
}

/// Rank agreement before and after alignment on the training lists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlignEval {
    pub n_lists: usize,
    /// Lists with at least one pair of distinct rewards.
    pub n_scored_lists: usize,
    pub n_perturbed_rewards: usize,
    pub mean_tau_before: Option<f64>,
    pub mean_tau_after: Option<f64>,
    pub n_improved: usize,
    pub n_at_ceiling: usize,
    pub taus: Vec<(Option<f64>, Option<f64>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageReport {
    pub stage: Stage,
    pub outputs: Vec<PathBuf>,
    pub notes: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct EvalRewrite {
    query: String,
    rewrite: String,
}

fn runtime<E: std::fmt::Display>(ctx: &Path) -> impl Fn(E) -> StageError + '_ {
    move |e| StageError::runtime(format!("{}: {e}", ctx.display()))
}

fn hash_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Content hash used in manifests. Table headers carry a timestamp, so only
/// the entry lines of a table are hashed.
fn artifact_hash(p: &Paths, path: &Path) -> Result<String, StageError> {
    if path == p.table {
        return Ok(hash_bytes(
            RewriteTable::load(path)?.entries_text().as_bytes(),
        ));
    }
    let bytes = std::fs::read(path).map_err(runtime(path))?;
    Ok(hash_bytes(&bytes))
}

fn pretty_json<T: Serialize>(path: &Path, value: &T) -> Result<(), StageError> {
    let mut body = serde_json::to_string_pretty(value).expect("value serializes");
    body.push('\n');
    jsonl::write_atomic(path, body.as_bytes()).map_err(StageError::from)
}

struct Ctx<'a> {
    cfg: &'a PipelineConfig,
    p: Paths,
}

impl Ctx<'_> {
    fn index(&self) -> Result<InvertedIndex, StageError> {
        Ok(build_index(&load_catalog(&self.p.world(PRODUCTS_FILE))?))
    }

    fn logs(&self, file: &str) -> Result<Vec<QueryLogRecord>, StageError> {
        let catalog = load_catalog(&self.p.world(PRODUCTS_FILE))?;
        Ok(load_logs(&self.p.world(file), &catalog)?)
    }

    fn vocab(&self) -> Result<Vocabulary, StageError> {
        Ok(Vocabulary::load(&self.p.vocab)?)
    }

    fn params(&self, path: &Path, vocab: &Vocabulary) -> Result<ModelParams, StageError> {
        Ok(checkpoint::load(path, vocab)?)
    }

    fn titles(&self, rec: &QueryLogRecord) -> Vec<String> {
        rec.interacted_titles
            .iter()
            .take(self.cfg.dataset.k_titles)
            .cloned()
            .collect()
    }
}

/// Runs one stage after checking its prerequisites, then records it in the
/// run manifest.
pub fn run_stage(stage: Stage, cfg: &PipelineConfig) -> Result<StageReport, StageError> {
    cfg.validate()?;
    let p = Paths::new(&cfg.out_dir);
    for input in stage.inputs(&p) {
        if !input.exists() {
            return Err(StageError::missing(format!(
                "{}: missing prerequisite {}",
                stage.name(),
                input.display()
            )));
        }
    }
    if stage == Stage::Serve && !cfg.serve.input.as_os_str().is_empty() && !cfg.serve.input.exists()
    {
        return Err(StageError::missing(format!(
            "serve: missing input {}",
            cfg.serve.input.display()
        )));
    }
    let mut manifest = RunManifest::load_or_new(&p.manifest, &cfg.hash())?;
    for input in stage.inputs(&p) {
        manifest
            .inputs
            .insert(p.rel(&input), artifact_hash(&p, &input)?);
    }

    let started = Instant::now();
    let ctx = Ctx { cfg, p: p.clone() };
    let mut notes = Vec::new();
    let outputs = match stage {
        Stage::GenWorld => gen_world(&ctx)?,
        Stage::BuildIndex => build_index_stage(&ctx)?,
        Stage::BuildDataset => {
            let (out, stats) = build_dataset_stage(&ctx, &mut notes)?;
            manifest.dataset_stats = Some(stats);
            out
        }
        Stage::TrainSft => train_sft_stage(&ctx, &mut notes)?,
        Stage::GenCandidates => gen_candidates(&ctx)?,
        Stage::ScoreFeedback => score_feedback(&ctx, &mut notes)?,
        Stage::TrainAlign => train_align_stage(&ctx, &mut notes)?,
        Stage::BuildTable => build_table_stage(&ctx, &mut notes)?,
        Stage::Serve => serve_stage(&ctx, &mut notes)?,
        Stage::Eval => eval_stage(&ctx, &mut notes)?,
    };
    let seconds = started.elapsed().as_secs_f64();

    let mut record = StageRecord {
        seconds,
        outputs: BTreeMap::new(),
    };
    for o in &outputs {
        record.outputs.insert(p.rel(o), artifact_hash(&p, o)?);
    }
    manifest.stages.insert(stage.name().to_string(), record);
    manifest.save(&p.manifest)?;
    Ok(StageReport {
        stage,
        outputs,
        notes,
    })
}

/// Every stage in dependency order.
pub fn run_all(cfg: &PipelineConfig) -> Result<Vec<StageReport>, StageError> {
    Stage::ALL.into_iter().map(|s| run_stage(s, cfg)).collect()
}

fn gen_world(ctx: &Ctx) -> Result<Vec<PathBuf>, StageError> {
    let w = &ctx.cfg.world;
    let world = SynthConfig::new(w.seed, w.n_products, w.n_queries, w.vocab_size).generate();
    world.save(&ctx.p.world_dir)?;
    Ok(
        [PRODUCTS_FILE, LOGS_FILE, EVAL_FILE, QUALITY_FILE, COT_FILE]
            .iter()
            .map(|f| ctx.p.world(f))
            .collect(),
    )
}

fn build_index_stage(ctx: &Ctx) -> Result<Vec<PathBuf>, StageError> {
    ctx.index()?.dump(&ctx.p.index)?;
    Ok(vec![ctx.p.index.clone()])
}

fn build_dataset_stage(
    ctx: &Ctx,
    notes: &mut Vec<String>,
) -> Result<(Vec<PathBuf>, qrw_core::datasetgen::DatasetStats), StageError> {
    let index = ctx.index()?;
    let scorer = scorer_by_name(&ctx.cfg.feedback.scorer)?;
    let fb = OfflineFeedback::new(&index, scorer.as_ref(), ctx.cfg.feedback.tau_prime);
    let logs = ctx.logs(LOGS_FILE)?;
    let quality: Vec<QualityRow> = jsonl::read(&ctx.p.world(QUALITY_FILE))?;
    let cot: Vec<CotRow> = jsonl::read(&ctx.p.world(COT_FILE))?;
    let built = build_dataset(&logs, &quality, &cot, &fb, &ctx.cfg.dataset_config())?;
    if built.examples.is_empty() {
        return Err(StageError::runtime(
            "build-dataset: no examples survived the filters",
        ));
    }

    let catalog = load_catalog(&ctx.p.world(PRODUCTS_FILE))?;
    let mut texts: Vec<&str> = Vec::new();
    for ex in &built.examples {
        texts.push(&ex.prompt);
        texts.push(&ex.response);
    }
    for prod in catalog.products() {
        texts.push(&prod.title);
    }
    for rec in &logs {
        texts.push(&rec.query);
        texts.extend(rec.legacy_rewrites.iter().map(String::as_str));
    }
    let vocab = build_vocab(texts, ctx.cfg.dataset.min_count)?;

    jsonl::write(&ctx.p.dataset, &built.examples)?;
    jsonl::write(&ctx.p.survivors, &built.survivors)?;
    vocab.save(&ctx.p.vocab)?;
    let s = &built.stats;
    notes.push(format!(
        "pairs {} -> {} (rele) -> {} (incr); {} examples total; vocabulary {}",
        s.n_initial,
        s.n_after_rele,
        s.n_after_incr,
        s.n_total,
        vocab.len()
    ));
    Ok((
        vec![
            ctx.p.dataset.clone(),
            ctx.p.survivors.clone(),
            ctx.p.vocab.clone(),
        ],
        built.stats,
    ))
}

fn train_sft_stage(ctx: &Ctx, notes: &mut Vec<String>) -> Result<Vec<PathBuf>, StageError> {
    let vocab = ctx.vocab()?;
    let examples: Vec<PromptExample> = jsonl::read(&ctx.p.dataset)?;
    let encoded: Vec<_> = examples.iter().map(|e| encode_example(&vocab, e)).collect();
    let init = ModelParams::init(ctx.cfg.model_config(vocab.len()), ctx.cfg.model.seed);
    notes.push(format!(
        "{} parameters, {} examples",
        init.len(),
        encoded.len()
    ));
    let (params, trace) = train_sft(init, &encoded, &ctx.cfg.sft_config())?;
    if let (Some(a), Some(b)) = (trace.first(), trace.last()) {
        notes.push(format!("batch loss {:.4} -> {:.4}", a.loss, b.loss));
    }
    checkpoint::save(&ctx.p.sft_ckpt, &params, &vocab)?;
    jsonl::write(&ctx.p.sft_trace, &trace)?;
    Ok(vec![ctx.p.sft_ckpt.clone(), ctx.p.sft_trace.clone()])
}

/// Distinct beam candidates for each distinct training query.
pub fn generate_candidates(
    params: &ModelParams,
    vocab: &Vocabulary,
    records: &[QueryLogRecord],
    k_titles: usize,
    beam_width: usize,
    max_len: usize,
) -> Result<Vec<CandidateRecord>, StageError> {
    use rayon::prelude::*;
    let mut seen = std::collections::HashSet::new();
    let uniq: Vec<&QueryLogRecord> = records
        .iter()
        .filter(|r| !tokenize(&r.query).is_empty() && seen.insert(normalize(&r.query)))
        .collect();
    uniq.par_iter()
        .map(|rec| {
            let titles: Vec<String> = rec
                .interacted_titles
                .iter()
                .take(k_titles)
                .cloned()
                .collect();
            let prompt = render_rewrite_prompt(&rec.query, &titles)?;
            let mut ids = vocab.encode(&prompt);
            ids.truncate(REWRITE_PROMPT_CAP);
            let candidates = beam_search(params, vocab, &ids, beam_width, max_len)
                .into_iter()
                .filter(|c| !c.text.is_empty())
                .map(|c| GeneratedCandidate {
                    text: c.text,
                    score: c.score,
                })
                .collect();
            Ok(CandidateRecord {
                query: rec.query.clone(),
                prompt,
                candidates,
            })
        })
        .collect::<Result<Vec<_>, Error>>()
        .map_err(StageError::from)
}

fn gen_candidates(ctx: &Ctx) -> Result<Vec<PathBuf>, StageError> {
    let vocab = ctx.vocab()?;
    let params = ctx.params(&ctx.p.sft_ckpt, &vocab)?;
    let logs = ctx.logs(LOGS_FILE)?;
    let c = &ctx.cfg.candidates;
    let recs = generate_candidates(
        &params,
        &vocab,
        &logs,
        ctx.cfg.dataset.k_titles,
        c.beam_width,
        c.max_len,
    )?;
    jsonl::write(&ctx.p.candidates, &recs)?;
    Ok(vec![ctx.p.candidates.clone()])
}

/// Scores candidate lists under the configured objective. Queries with no
/// scorable candidate are dropped.
pub fn score_candidate_records(
    fb: &OfflineFeedback<'_>,
    records: &[CandidateRecord],
    logs: &[QueryLogRecord],
    objective: qrw_core::feedback::Objective,
) -> Result<(Vec<AlignmentRecord>, Vec<ScoredCandidate>, usize), StageError> {
    let tx_of: BTreeMap<String, &QueryLogRecord> = logs
        .iter()
        .rev()
        .map(|r| (normalize(&r.query), r))
        .collect();
    let mut aligned = Vec::new();
    let mut scored = Vec::new();
    let mut dropped = 0;
    for rec in records {
        let texts: Vec<String> = rec.candidates.iter().map(|c| c.text.clone()).collect();
        let tx = tx_of
            .get(&normalize(&rec.query))
            .map(|r| fb.index().to_set(r.transactions.iter().map(String::as_str)))
            .unwrap_or_else(RetrievalSet::empty);
        match score_candidates(fb, &rec.query, &texts, objective, &tx) {
            Ok((ranked, raw)) => {
                scored.extend(raw);
                aligned.push(AlignmentRecord {
                    query: rec.query.clone(),
                    prompt: rec.prompt.clone(),
                    candidates: ranked
                        .entries
                        .into_iter()
                        .map(|e| (e.rewrite, e.reward))
                        .collect(),
                    objective,
                });
            }
            Err(Error::NoScorableCandidates(_)) => {
                dropped += 1;
                scored.extend(texts.iter().map(|t| ScoredCandidate {
                    query: rec.query.clone(),
                    rewrite: t.clone(),
                    objective,
                    reward: None,
                    valid: false,
                }));
            }
            Err(e) => return Err(e.into()),
        }
    }
    Ok((aligned, scored, dropped))
}

fn score_feedback(ctx: &Ctx, notes: &mut Vec<String>) -> Result<Vec<PathBuf>, StageError> {
    let index = ctx.index()?;
    let scorer = scorer_by_name(&ctx.cfg.feedback.scorer)?;
    let fb = OfflineFeedback::new(&index, scorer.as_ref(), ctx.cfg.feedback.tau_prime);
    let recs: Vec<CandidateRecord> = jsonl::read(&ctx.p.candidates)?;
    let logs = ctx.logs(LOGS_FILE)?;
    let (aligned, scored, dropped) =
        score_candidate_records(&fb, &recs, &logs, ctx.cfg.feedback.objective)?;
    notes.push(format!(
        "{} lists kept, {} dropped with no scorable candidate",
        aligned.len(),
        dropped
    ));
    jsonl::write(&ctx.p.scored, &scored)?;
    save_records(&ctx.p.alignment, &aligned)?;
    Ok(vec![ctx.p.scored.clone(), ctx.p.alignment.clone()])
}

/// Encodes alignment records into training samples.
pub fn alignment_samples(
    vocab: &Vocabulary,
    records: &[AlignmentRecord],
    contrast: usize,
    tie_epsilon: f64,
) -> Result<Vec<AlignmentSample>, StageError> {
    let mut out = Vec::new();
    for r in records {
        if let Some(s) = encode_record(vocab, r, contrast, REWRITE_PROMPT_CAP, tie_epsilon)? {
            out.push(s);
        }
    }
    Ok(out)
}

/// Tau summary comparing two models on the same lists.
pub fn compare_taus(
    before: &ModelParams,
    after: &ModelParams,
    samples: &[AlignmentSample],
) -> Result<AlignEval, StageError> {
    let b = list_taus(before, samples)?;
    let a = list_taus(after, samples)?;
    let pairs: Vec<(f64, f64)> = b
        .iter()
        .zip(&a)
        .filter_map(|(x, y)| Some(((*x)?, (*y)?)))
        .collect();
    let mean = |f: &dyn Fn(&(f64, f64)) -> f64| {
        (!pairs.is_empty()).then(|| pairs.iter().map(f).sum::<f64>() / pairs.len() as f64)
    };
    Ok(AlignEval {
        n_lists: samples.len(),
        n_scored_lists: pairs.len(),
        n_perturbed_rewards: samples.iter().map(|s| s.perturbed.len()).sum(),
        mean_tau_before: mean(&|p| p.0),
        mean_tau_after: mean(&|p| p.1),
        n_improved: pairs.iter().filter(|(x, y)| y > x).count(),
        n_at_ceiling: pairs.iter().filter(|(x, y)| *x == 1.0 && *y == 1.0).count(),
        taus: b.into_iter().zip(a).collect(),
    })
}

fn train_align_stage(ctx: &Ctx, notes: &mut Vec<String>) -> Result<Vec<PathBuf>, StageError> {
    let vocab = ctx.vocab()?;
    let init = ctx.params(&ctx.p.sft_ckpt, &vocab)?;
    let records = load_records(&ctx.p.alignment)?;
    let a = &ctx.cfg.align;
    let samples = alignment_samples(&vocab, &records, a.contrast, a.tie_epsilon)?;
    if samples.is_empty() {
        return Err(StageError::runtime(
            "train-align: no list with two or more candidates to align on",
        ));
    }
    let (params, trace) = train_align(init.clone(), &samples, &ctx.cfg.align_config())?;
    let eval = compare_taus(&init, &params, &samples)?;
    notes.push(format!(
        "{} lists; mean tau {:?} -> {:?}; improved on {} of {}",
        eval.n_lists,
        eval.mean_tau_before,
        eval.mean_tau_after,
        eval.n_improved,
        eval.n_scored_lists
    ));
    checkpoint::save(&ctx.p.align_ckpt, &params, &vocab)?;
    jsonl::write(&ctx.p.align_trace, &trace)?;
    pretty_json(&ctx.p.align_eval, &eval)?;
    Ok(vec![
        ctx.p.align_ckpt.clone(),
        ctx.p.align_trace.clone(),
        ctx.p.align_eval.clone(),
    ])
}

fn build_table_stage(ctx: &Ctx, notes: &mut Vec<String>) -> Result<Vec<PathBuf>, StageError> {
    let vocab = ctx.vocab()?;
    let params = ctx.params(&ctx.p.align_ckpt, &vocab)?;
    let index = ctx.index()?;
    let scorer = scorer_by_name(&ctx.cfg.feedback.scorer)?;
    let mut queries: Vec<TableQuery> = Vec::new();
    for file in [LOGS_FILE, EVAL_FILE] {
        for rec in ctx.logs(file)? {
            queries.push(TableQuery {
                titles: ctx.titles(&rec),
                query: rec.query,
            });
        }
    }
    let table = build_rewrite_table(
        &params,
        &vocab,
        &queries,
        &index,
        scorer.as_ref(),
        &ctx.cfg.serving_config(),
        &checkpoint::file_hash(&ctx.p.align_ckpt)?,
        &timestamp_now(),
    )?;
    let s = &table.meta.stats;
    notes.push(format!(
        "{} queries considered, {} eligible, {} covered, {} identity-only",
        s.considered, s.eligible, s.covered, s.identity_only
    ));
    table.save(&ctx.p.table)?;
    Ok(vec![ctx.p.table.clone()])
}

fn serve_stage(ctx: &Ctx, notes: &mut Vec<String>) -> Result<Vec<PathBuf>, StageError> {
    let index = ctx.index()?;
    let table = RewriteTable::load(&ctx.p.table)?;
    let queries: Vec<String> = if ctx.cfg.serve.input.as_os_str().is_empty() {
        ctx.logs(EVAL_FILE)?.into_iter().map(|r| r.query).collect()
    } else {
        std::fs::read_to_string(&ctx.cfg.serve.input)
            .map_err(runtime(&ctx.cfg.serve.input))?
            .lines()
            .map(str::to_string)
            .collect()
    };
    let mut out = Vec::new();
    let mut skipped = 0;
    for q in queries {
        if tokenize(&q).is_empty() {
            skipped += 1;
            continue;
        }
        let r = serve_retrieve(&index, &table, &q)?;
        out.push(ServeRecord::new(&index, &q, &r));
    }
    let covered = out.iter().filter(|r| r.covered).count();
    notes.push(format!(
        "{} queries served, {covered} covered, {skipped} blank",
        out.len()
    ));
    jsonl::write(&ctx.p.serve_out, &out)?;
    Ok(vec![ctx.p.serve_out.clone()])
}

/// The model's best rewrite for a query: the top beam candidate that differs
/// from the query, or the query itself when none does.
pub fn top_rewrite(
    params: &ModelParams,
    vocab: &Vocabulary,
    query: &str,
    titles: &[String],
    beam_width: usize,
    max_len: usize,
) -> Result<String, StageError> {
    let q = normalize(query);
    let ids = rewrite_prompt_ids(vocab, query, titles)?;
    Ok(beam_search(params, vocab, &ids, beam_width, max_len)
        .into_iter()
        .map(|c| normalize(&c.text))
        .find(|t| !t.is_empty() && *t != q)
        .unwrap_or(q))
}

fn eval_stage(ctx: &Ctx, notes: &mut Vec<String>) -> Result<Vec<PathBuf>, StageError> {
    let vocab = ctx.vocab()?;
    let params = ctx.params(&ctx.p.align_ckpt, &vocab)?;
    let index = ctx.index()?;
    let scorer = scorer_by_name(&ctx.cfg.feedback.scorer)?;
    let fb = OfflineFeedback::new(&index, scorer.as_ref(), ctx.cfg.feedback.tau_prime);
    let s = &ctx.cfg.serving;
    let eval: Vec<QueryLogRecord> = ctx
        .logs(EVAL_FILE)?
        .into_iter()
        .filter(|r| !tokenize(&r.query).is_empty())
        .collect();
    let outputs = {
        use rayon::prelude::*;
        eval.par_iter()
            .map(|r| {
                let rw = top_rewrite(
                    &params,
                    &vocab,
                    &r.query,
                    &ctx.titles(r),
                    s.beam_width,
                    s.max_len,
                )?;
                Ok((r.clone(), rw))
            })
            .collect::<Result<Vec<_>, StageError>>()?
    };
    let report = evaluate_report(&fb, &outputs)?;
    let rewrites: Vec<EvalRewrite> = outputs
        .iter()
        .map(|(r, w)| EvalRewrite {
            query: r.query.clone(),
            rewrite: w.clone(),
        })
        .collect();
    let text = render_report(&report);
    notes.push(text.clone());
    jsonl::write(&ctx.p.eval_rewrites, &rewrites)?;
    pretty_json(&ctx.p.report_json, &report)?;
    jsonl::write_atomic(&ctx.p.report_txt, text.as_bytes())?;
    Ok(vec![
        ctx.p.eval_rewrites.clone(),
        ctx.p.report_json.clone(),
        ctx.p.report_txt.clone(),
    ])
}

/// Loads a world previously written by `gen-world`.
pub fn load_world(p: &Paths) -> Result<World, StageError> {
    Ok(World::load(&p.world_dir)?)
}
