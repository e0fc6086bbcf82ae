//! Experiment orchestration: pipeline stages, LLM and baseline cells, the
//! context ablation, reports and verification.
//!
//! Output layout under `output_dir`:
//!
//! ```text
//! corpus/    per-domain datasets, paired corpora, manifest.json
//! evalsets/  one JSONL eval set per pair
//! cache/     one JSON file per completion
//! results/   per-instance records, one JSONL file per cell
//! reports/   results.json, text tables, ablation data, run_stats.json
//! ```

mod config;
mod report;

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use config::{AblationConfig, BaselineConfig, DomainSource, LabelMapConfig, PairConfig, RunConfig};
pub use report::{
    render_ablation_table, render_pair_stats, render_task_table, PublishedRow, PUBLISHED_RANKING, PUBLISHED_RATING,
};

use crate::baselines::{
    rank_with_model, save_checkpoint, train_cmf, train_emcdr, train_mf, Emcdr, Scorer,
};
use crate::corpus::{self, DomainDataset, PairStats, PairedCorpus, StageCounts};
use crate::llm_gateway::{
    Gateway, GatewayError, ModelSpec, ResponseCache, StatsSnapshot, TokenBudget, TokenUsage,
};
use crate::metrics::{aggregate, MetricsReport, RankingOutcome, RatingOutcome};
use crate::promptgen::{
    Context, Injection, PromptError, PromptParts, PromptVariant, RenderedPrompt, Renderer, Task, TemplateSet,
};
use crate::respparse::{parse_ranking, parse_rating, rank_of_positive, LabelMap};
use crate::sampler::{self, EvalInstance};
use crate::{Error, Result};

/// Lowercase ASCII alphanumerics with `-` separators.
pub fn slug(name: &str) -> String {
    let mut out = String::new();
    for c in name.chars() {
        if c.is_ascii_alphanumeric() || c == '.' || c == '_' {
            out.push(c.to_ascii_lowercase());
        } else if !out.ends_with('-') {
            out.push('-');
        }
    }
    out.trim_matches('-').to_string()
}

#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.root.join("corpus")
    }
    pub fn evalsets_dir(&self) -> PathBuf {
        self.root.join("evalsets")
    }
    pub fn cache_dir(&self) -> PathBuf {
        self.root.join("cache")
    }
    pub fn results_dir(&self) -> PathBuf {
        self.root.join("results")
    }
    pub fn reports_dir(&self) -> PathBuf {
        self.root.join("reports")
    }
    pub fn domain_file(&self, domain: &str) -> PathBuf {
        self.corpus_dir().join("domains").join(format!("{}.json", slug(domain)))
    }
    pub fn manifest(&self) -> PathBuf {
        self.corpus_dir().join("manifest.json")
    }
    pub fn pair_corpus(&self, pair: &str) -> PathBuf {
        self.corpus_dir().join(format!("{}.jsonl", slug(pair)))
    }
    pub fn evalset(&self, pair: &str) -> PathBuf {
        self.evalsets_dir().join(format!("{}.jsonl", slug(pair)))
    }
    /// Records file of a cell, relative to the output directory.
    pub fn records_rel(&self, pair: &str, model: &str, cell: &str) -> String {
        format!("results/{}/{}/{}.jsonl", slug(pair), slug(model), cell)
    }
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p)?;
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    create_parent(path)?;
    let mut text = serde_json::to_string_pretty(value).map_err(std::io::Error::from)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn file_sha256(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

// ---------------------------------------------------------------- stages

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainManifest {
    pub reviews: PathBuf,
    pub meta: PathBuf,
    pub reviews_sha256: String,
    pub meta_sha256: String,
    pub ingest: StageCounts,
    pub join: StageCounts,
    pub duplicate_catalog_ids: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub domains: BTreeMap<String, DomainManifest>,
}

impl Manifest {
    /// `domain/reviews` and `domain/meta` checksums.
    pub fn checksums(&self) -> BTreeMap<String, String> {
        let mut out = BTreeMap::new();
        for (d, m) in &self.domains {
            out.insert(format!("{d}/reviews"), m.reviews_sha256.clone());
            out.insert(format!("{d}/meta"), m.meta_sha256.clone());
        }
        out
    }
}

/// Parse and title-join every domain referenced by a pair, once per domain.
pub fn ingest(cfg: &RunConfig) -> Result<Manifest> {
    let layout = Layout::new(&cfg.output_dir);
    let mut manifest = Manifest::default();
    for src in cfg.pairs.iter().flat_map(|p| [&p.source, &p.target]).flatten() {
        if let Some(prev) = manifest.domains.get(&src.domain) {
            if prev.reviews != src.reviews || prev.meta != src.meta {
                return Err(Error::Config(format!("domain {:?} is bound to two different inputs", src.domain)));
            }
            continue;
        }
        log::info!("ingesting {} from {}", src.domain, src.reviews.display());
        let ing = corpus::ingest_reviews(&src.reviews, &src.domain)?;
        let (catalog, dups, meta_sha) = corpus::load_catalog(&src.meta)?;
        let joined = corpus::join_catalog(ing.dataset, &catalog)?;
        write_json(&layout.domain_file(&src.domain), &joined.dataset)?;
        manifest.domains.insert(
            src.domain.clone(),
            DomainManifest {
                reviews: src.reviews.clone(),
                meta: src.meta.clone(),
                reviews_sha256: ing.sha256,
                meta_sha256: meta_sha,
                ingest: ing.counts,
                join: joined.counts,
                duplicate_catalog_ids: dups + joined.duplicate_catalog_ids,
            },
        );
    }
    write_json(&layout.manifest(), &manifest)?;
    Ok(manifest)
}

fn load_manifest(cfg: &RunConfig) -> Result<Manifest> {
    let layout = Layout::new(&cfg.output_dir);
    if layout.manifest().exists() {
        read_json(&layout.manifest())
    } else {
        ingest(cfg)
    }
}

/// Build the paired corpora and the per-pair statistics table.
pub fn pair(cfg: &RunConfig) -> Result<Vec<(String, PairStats)>> {
    let layout = Layout::new(&cfg.output_dir);
    let manifest = load_manifest(cfg)?;
    let mut out = Vec::new();
    for p in &cfg.pairs {
        let (Some(s), Some(t)) = (&p.source, &p.target) else { continue };
        let load = |d: &str| -> Result<DomainDataset> {
            if !manifest.domains.contains_key(d) || !layout.domain_file(d).exists() {
                ingest(cfg)?;
            }
            read_json(&layout.domain_file(d))
        };
        let (src, tgt) = (load(&s.domain)?, load(&t.domain)?);
        let pc = corpus::build_pair(&src, &tgt, &p.name)?;
        let path = layout.pair_corpus(&p.name);
        create_parent(&path)?;
        corpus::write_corpus(&pc, &path)?;
        out.push((p.name.clone(), corpus::corpus_stats(&pc)));
    }
    let rows: Vec<(String, String, String, PairStats)> = cfg
        .pairs
        .iter()
        .filter_map(|p| Some((p, p.source.as_ref()?, p.target.as_ref()?)))
        .zip(&out)
        .map(|((p, s, t), (_, st))| (p.name.clone(), s.domain.clone(), t.domain.clone(), *st))
        .collect();
    write_json(&layout.reports_dir().join("pair_stats.json"), &rows)?;
    fs::write(layout.reports_dir().join("pair_stats.txt"), render_pair_stats(&rows))?;
    Ok(out)
}

fn load_pair_corpus(cfg: &RunConfig, name: &str) -> Result<PairedCorpus> {
    let path = Layout::new(&cfg.output_dir).pair_corpus(name);
    if !path.exists() {
        pair(cfg)?;
    }
    Ok(corpus::read_corpus(&path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSummary {
    pub pair: String,
    pub instances: usize,
    pub skipped: usize,
    pub path: PathBuf,
}

/// Split each corpus pair and write its eval set. Pairs configured with a
/// fixed eval set are left alone.
pub fn sample(cfg: &RunConfig) -> Result<Vec<SampleSummary>> {
    let layout = Layout::new(&cfg.output_dir);
    let mut out = Vec::new();
    for p in cfg.pairs.iter().filter(|p| p.evalset.is_none()) {
        let pc = load_pair_corpus(cfg, &p.name)?;
        let split = sampler::split(&pc, &cfg.split)?;
        let set = sampler::sample_eval_set(&split, &cfg.split)?;
        let path = layout.evalset(&p.name);
        create_parent(&path)?;
        sampler::write_eval_set(&set.instances, &path)?;
        write_json(&path.with_extension("skipped.json"), &set.skipped)?;
        log::info!("{}: {} instances, {} skipped", p.name, set.instances.len(), set.skipped.len());
        out.push(SampleSummary {
            pair: p.name.clone(),
            instances: set.instances.len(),
            skipped: set.skipped.len(),
            path,
        });
    }
    Ok(out)
}

/// The pair's eval set and the checksum of the file it came from.
pub fn load_eval_set(cfg: &RunConfig, p: &PairConfig) -> Result<(Vec<EvalInstance>, String)> {
    let path = match &p.evalset {
        Some(e) => e.clone(),
        None => {
            let path = Layout::new(&cfg.output_dir).evalset(&p.name);
            if !path.exists() {
                sample(cfg)?;
            }
            path
        }
    };
    let instances = sampler::read_eval_set(&path)?;
    for inst in &instances {
        inst.check_invariants()
            .map_err(|e| Error::Config(format!("{}: instance {}: {e}", path.display(), inst.user_id)))?;
    }
    Ok((instances, file_sha256(&path)?))
}

// ---------------------------------------------------------------- records

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordStatus {
    Ok,
    ParseFailure,
    PromptSkipped,
    BackendError,
    BudgetExhausted,
}

/// Outcome for one eval instance within one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub user_id: String,
    pub item_id: String,
    pub status: RecordStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<Context>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_key: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y_hat: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_u: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_total: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hallucinations: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub appended: Option<usize>,
    #[serde(default)]
    pub token_usage: TokenUsage,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

impl InstanceRecord {
    fn new(inst: &EvalInstance, status: RecordStatus) -> Self {
        Self {
            user_id: inst.user_id.clone(),
            item_id: inst.positive.item_id.clone(),
            status,
            context: None,
            cache_key: None,
            raw_text: None,
            y: None,
            y_hat: None,
            p_u: None,
            k_total: None,
            hallucinations: None,
            appended: None,
            token_usage: TokenUsage::default(),
            detail: None,
        }
    }
}

pub fn write_records(path: &Path, records: &[InstanceRecord]) -> Result<()> {
    create_parent(path)?;
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<InstanceRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Config(format!("{} line {}: {e}", path.display(), n + 1)))?,
        );
    }
    Ok(out)
}

/// Metrics of a cell from its records; `None` when nothing was scored.
pub fn aggregate_records(records: &[InstanceRecord]) -> Option<MetricsReport> {
    let ok = records.iter().filter(|r| r.status == RecordStatus::Ok);
    let ratings: Vec<RatingOutcome> = ok
        .clone()
        .filter_map(|r| Some(RatingOutcome { y: r.y?, y_hat: r.y_hat? }))
        .collect();
    let rankings: Vec<RankingOutcome> = ok
        .filter_map(|r| Some(RankingOutcome { p_u: r.p_u?, k_total: r.k_total? }))
        .collect();
    let failures = records.iter().filter(|r| r.status == RecordStatus::ParseFailure).count();
    aggregate(&ratings, &rankings, failures).ok()
}

pub fn token_total(records: &[InstanceRecord]) -> TokenUsage {
    records.iter().fold(TokenUsage::default(), |acc, r| TokenUsage {
        input: acc.input + r.token_usage.input,
        output: acc.output + r.token_usage.output,
    })
}

// ---------------------------------------------------------------- tables

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Complete,
    Partial,
    Skipped,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub status: CellStatus,
    pub metrics: Option<MetricsReport>,
    /// Per-instance records, relative to the output directory.
    pub records: Option<String>,
    pub instances: usize,
    pub prompt_skipped: usize,
    pub errors: usize,
    pub token_usage: TokenUsage,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl CellResult {
    fn failed(note: String) -> Self {
        Self {
            status: CellStatus::Failed,
            metrics: None,
            records: None,
            instances: 0,
            prompt_skipped: 0,
            errors: 0,
            token_usage: TokenUsage::default(),
            note: Some(note),
        }
    }

    fn from_records(records: &[InstanceRecord], rel: String, note: Option<String>) -> Self {
        let count = |s: RecordStatus| records.iter().filter(|r| r.status == s).count();
        let answered = count(RecordStatus::Ok) + count(RecordStatus::ParseFailure);
        let errors = count(RecordStatus::BackendError);
        let budget = count(RecordStatus::BudgetExhausted);
        let status = if answered == 0 && budget > 0 && errors == 0 {
            CellStatus::Skipped
        } else if answered == 0 {
            CellStatus::Failed
        } else if errors + budget > 0 {
            CellStatus::Partial
        } else {
            CellStatus::Complete
        };
        Self {
            status,
            metrics: aggregate_records(records),
            records: Some(rel),
            instances: records.len(),
            prompt_skipped: count(RecordStatus::PromptSkipped),
            errors: errors + budget,
            token_usage: token_total(records),
            note,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowKind {
    Llm,
    Baseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub label: String,
    pub model: String,
    pub kind: RowKind,
    pub task: Task,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<PromptVariant>,
    /// Keyed by pair name.
    pub cells: BTreeMap<String, CellResult>,
}

/// `model-with` / `model-no`, suffixed for medium context.
pub fn row_label(model: &str, v: PromptVariant) -> String {
    let inj = match v.injection {
        Injection::With => "with",
        Injection::No => "no",
    };
    match v.context {
        Context::High => format!("{model}-{inj}"),
        Context::Medium => format!("{model}-{inj} (medium)"),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub version: String,
    pub seed: u64,
    pub split: sampler::SplitConfig,
    pub label_map: [f64; 6],
    pub similarity_threshold: f64,
    pub max_prompt_chars: usize,
    pub models: Vec<ModelSpec>,
    pub dataset_checksums: BTreeMap<String, String>,
    pub evalset_checksums: BTreeMap<String, String>,
    /// Keyed by `pair / row label / task`.
    pub parse_failure_rates: BTreeMap<String, f64>,
    /// Sum of per-record token usage over all cells.
    pub token_totals: TokenUsage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub pairs: Vec<String>,
    pub rows: Vec<ResultRow>,
    /// Per-epoch training objective by pair, then baseline.
    pub training_curves: BTreeMap<String, BTreeMap<String, Vec<f64>>>,
    pub provenance: Provenance,
}

impl ResultTable {
    pub fn cells(&self) -> impl Iterator<Item = (&ResultRow, &String, &CellResult)> {
        self.rows
            .iter()
            .flat_map(|r| r.cells.iter().map(move |(p, c)| (r, p, c)))
    }

    pub fn all_complete(&self) -> bool {
        self.cells().all(|(_, _, c)| c.status == CellStatus::Complete)
    }

    fn finish_provenance(&mut self) {
        let mut rates = BTreeMap::new();
        let mut totals = TokenUsage::default();
        for (row, pair, cell) in self.cells() {
            if let Some(m) = &cell.metrics {
                let task = match row.task {
                    Task::Rating => "rating",
                    Task::Ranking => "ranking",
                };
                rates.insert(format!("{pair} / {} / {task}", row.label), m.parse_failure_rate);
            }
            totals.input += cell.token_usage.input;
            totals.output += cell.token_usage.output;
        }
        self.provenance.parse_failure_rates = rates;
        self.provenance.token_totals = totals;
    }
}

// ---------------------------------------------------------------- cells

/// Everything a cell needs besides the model.
pub struct CellContext<'a> {
    pub layout: &'a Layout,
    pub renderer: &'a Renderer,
    pub label_map: &'a LabelMap,
    pub threshold: f64,
}

fn render_prompt(renderer: &Renderer, inst: &EvalInstance, v: PromptVariant) -> Result<RenderedPrompt, PromptError> {
    let parts = PromptParts::from_instance(inst, v);
    match renderer.render_parts(&parts) {
        Err(PromptError::OverBudget { chars, budget }) if v.context == Context::High => {
            log::warn!("{}: {chars} chars over budget {budget}, retrying at medium context", inst.user_id);
            renderer.degrade_to_medium(&parts)
        }
        other => other,
    }
}

fn score_reply(rec: &mut InstanceRecord, inst: &EvalInstance, task: Task, raw: &str, cx: &CellContext) {
    match task {
        Task::Rating => match parse_rating(raw) {
            Ok(p) => {
                rec.y = Some(inst.positive.rating);
                rec.y_hat = Some(cx.label_map.rating(p.label));
                if p.ambiguous {
                    rec.detail = Some("several labels present; first kept".into());
                }
            }
            Err(e) => {
                rec.status = RecordStatus::ParseFailure;
                rec.detail = Some(e.to_string());
            }
        },
        Task::Ranking => {
            let titles: Vec<String> = inst.candidates.iter().map(|c| c.title.clone()).collect();
            match parse_ranking(raw, &titles, cx.threshold) {
                Ok(p) => {
                    rec.p_u = Some(rank_of_positive(&p, inst.positive_index));
                    rec.k_total = Some(titles.len());
                    rec.hallucinations = Some(p.dropped_hallucinations);
                    rec.appended = Some(p.appended_missing);
                }
                Err(e) => {
                    rec.status = RecordStatus::ParseFailure;
                    rec.detail = Some(e.to_string());
                }
            }
        }
    }
}

/// Render, complete, parse and score one (model, variant) cell over a pair's
/// eval set, persisting the per-instance records.
pub fn run_llm_cell(
    gw: &Gateway,
    pair: &str,
    instances: &[EvalInstance],
    v: PromptVariant,
    cx: &CellContext,
) -> Result<CellResult> {
    let mut records: Vec<Option<InstanceRecord>> = vec![None; instances.len()];
    let mut jobs = Vec::new();
    let mut slots = Vec::new();
    for (i, inst) in instances.iter().enumerate() {
        match render_prompt(cx.renderer, inst, v) {
            Ok(p) => {
                jobs.push((p, inst));
                slots.push(i);
            }
            Err(e) => {
                let mut r = InstanceRecord::new(inst, RecordStatus::PromptSkipped);
                r.detail = Some(e.to_string());
                records[i] = Some(r);
            }
        }
    }
    let replies = gw.complete_all(&jobs);
    let mut fatal = None;
    for ((i, (prompt, inst)), reply) in slots.into_iter().zip(&jobs).zip(replies) {
        let mut r = InstanceRecord::new(inst, RecordStatus::Ok);
        r.context = Some(prompt.variant.context);
        match reply {
            Ok(c) => {
                r.cache_key = Some(c.cache_key);
                r.token_usage = c.token_usage;
                score_reply(&mut r, inst, v.task, &c.raw_text, cx);
                r.raw_text = Some(c.raw_text);
            }
            Err(e) => {
                r.status = if e == GatewayError::BudgetExhausted {
                    RecordStatus::BudgetExhausted
                } else {
                    RecordStatus::BackendError
                };
                if e.is_fatal() {
                    fatal.get_or_insert_with(|| e.to_string());
                }
                r.detail = Some(e.to_string());
            }
        }
        records[i] = Some(r);
    }
    let records: Vec<InstanceRecord> = records.into_iter().map(|r| r.expect("every instance recorded")).collect();
    let rel = cx.layout.records_rel(pair, gw.spec.display_name(), &v.to_string());
    write_records(&cx.layout.root.join(&rel), &records)?;
    Ok(CellResult::from_records(&records, rel, fatal))
}

fn baseline_records<S: Scorer + ?Sized>(model: &S, instances: &[EvalInstance], task: Task) -> Vec<InstanceRecord> {
    instances
        .iter()
        .map(|inst| {
            let mut r = InstanceRecord::new(inst, RecordStatus::Ok);
            match task {
                Task::Rating => {
                    r.y = Some(inst.positive.rating);
                    r.y_hat = Some(model.score(&inst.user_id, &inst.positive.item_id));
                }
                Task::Ranking => {
                    let o = rank_with_model(model, inst);
                    r.p_u = Some(o.p_u);
                    r.k_total = Some(o.k_total);
                }
            }
            r
        })
        .collect()
}

pub const BASELINE_NAMES: [&str; 3] = ["TGT", "CMF", "EMCDR"];

/// Train the enabled baselines on the pair's training split and score the
/// eval set. Returns cells keyed by `(name, task)` and training curves.
#[allow(clippy::type_complexity)]
pub fn run_baselines(
    cfg: &RunConfig,
    layout: &Layout,
    pc: &PairedCorpus,
    instances: &[EvalInstance],
) -> Result<(BTreeMap<(String, Task), CellResult>, BTreeMap<String, Vec<f64>>)> {
    let b = &cfg.baselines;
    let train = sampler::split(pc, &cfg.split)?.train;
    let mut cells = BTreeMap::new();
    let mut curves = BTreeMap::new();
    let pair = &pc.pair_name;

    let emit = |name: &str, scorer: &dyn Scorer, ckpt: &dyn Fn(&Path) -> Result<()>| -> Result<Vec<((String, Task), CellResult)>> {
        let dir = layout.results_dir().join(slug(pair)).join(slug(name));
        fs::create_dir_all(&dir)?;
        ckpt(&dir.join("model.ckpt"))?;
        let mut out = Vec::new();
        for task in [Task::Rating, Task::Ranking] {
            let recs = baseline_records(scorer, instances, task);
            let cell_name = match task {
                Task::Rating => "rating",
                Task::Ranking => "ranking",
            };
            let rel = layout.records_rel(pair, name, cell_name);
            write_records(&layout.root.join(&rel), &recs)?;
            out.push(((name.to_string(), task), CellResult::from_records(&recs, rel, None)));
        }
        Ok(out)
    };
    let fail_all = |cells: &mut BTreeMap<(String, Task), CellResult>, name: &str, e: String| {
        log::warn!("{pair}: {name} failed: {e}");
        for task in [Task::Rating, Task::Ranking] {
            cells.insert((name.to_string(), task), CellResult::failed(e.clone()));
        }
    };

    let target_mf = if b.tgt || b.emcdr {
        Some(train_mf(&train.target.interactions, &b.mf))
    } else {
        None
    };
    if b.tgt {
        match target_mf.as_ref().unwrap() {
            Ok(m) => {
                curves.insert("TGT".to_string(), m.loss_curve.clone());
                cells.extend(emit("TGT", m, &|p| Ok(save_checkpoint(m, p)?))?);
            }
            Err(e) => fail_all(&mut cells, "TGT", e.to_string()),
        }
    }
    if b.cmf {
        match train_cmf(&train.source.interactions, &train.target.interactions, &b.mf) {
            Ok(m) => {
                curves.insert("CMF".to_string(), m.loss_curve.clone());
                cells.extend(emit("CMF", &m, &|p| Ok(save_checkpoint(&m, p)?))?);
            }
            Err(e) => fail_all(&mut cells, "CMF", e.to_string()),
        }
    }
    if b.emcdr {
        let built = (|| -> std::result::Result<Emcdr, crate::baselines::TrainError> {
            let target = match target_mf.as_ref().unwrap() {
                Ok(m) => m.clone(),
                Err(e) => return Err(crate::baselines::TrainError::Params(format!("target MF: {e}"))),
            };
            let source = train_mf(&train.source.interactions, &b.mf)?;
            let mapper = train_emcdr(&source, &target, &train.overlap_users, &b.mapper)?;
            Ok(Emcdr { mapper, source, target })
        })();
        match built {
            Ok(m) => {
                curves.insert("EMCDR".to_string(), m.mapper.loss_curve.clone());
                cells.extend(emit("EMCDR", &m, &|p| Ok(save_checkpoint(&(&m.mapper, &m.source, &m.target), p)?))?);
            }
            Err(e) => fail_all(&mut cells, "EMCDR", e.to_string()),
        }
    }
    Ok((cells, curves))
}

// ---------------------------------------------------------------- runs

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    /// Gateway counters per model label.
    pub models: BTreeMap<String, StatsSnapshot>,
    pub budget_used: Option<u64>,
    pub budget_limit: Option<u64>,
}

impl RunStats {
    pub fn backend_calls(&self) -> usize {
        self.models.values().map(|s| s.backend_calls).sum()
    }

    pub fn network_requests(&self) -> usize {
        self.models.values().map(|s| s.network_requests).sum()
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub table: ResultTable,
    pub stats: RunStats,
    pub written: Vec<PathBuf>,
}

impl RunOutcome {
    /// 0 when every cell completed, 2 otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.table.all_complete() {
            0
        } else {
            2
        }
    }
}

/// Shared state of one invocation: renderer, label map, cache and budget.
struct Session {
    layout: Layout,
    renderer: Renderer,
    label_map: LabelMap,
    budget: Option<Arc<TokenBudget>>,
    gateways: Vec<(ModelSpec, std::result::Result<Gateway, String>)>,
}

impl Session {
    fn open(cfg: &RunConfig) -> Result<Self> {
        let layout = Layout::new(&cfg.output_dir);
        fs::create_dir_all(&layout.root)?;
        let templates = match &cfg.templates_dir {
            Some(d) => TemplateSet::load_dir(d)?,
            None => TemplateSet::builtin(),
        };
        let renderer = Renderer {
            templates,
            max_chars: cfg.max_prompt_chars,
        };
        let label_map = cfg.label_map.resolve()?;
        let budget = cfg.cost_ceiling_tokens.map(|n| Arc::new(TokenBudget::new(n)));
        let cache = ResponseCache::new(&layout.cache_dir())?;
        let gateways = cfg
            .models
            .iter()
            .map(|spec| {
                let gw = Gateway::for_spec(spec.clone(), &cfg.gateway, label_map).map(|g| {
                    let g = g.with_cache(cache.clone());
                    match &budget {
                        Some(b) => g.with_budget(b.clone()),
                        None => g,
                    }
                });
                (spec.clone(), gw.map_err(|e| e.to_string()))
            })
            .collect();
        Ok(Self {
            layout,
            renderer,
            label_map,
            budget,
            gateways,
        })
    }

    fn cx(&self, cfg: &RunConfig) -> CellContext<'_> {
        CellContext {
            layout: &self.layout,
            renderer: &self.renderer,
            label_map: &self.label_map,
            threshold: cfg.similarity_threshold,
        }
    }

    fn gateway(&self, label: &str) -> Option<&(ModelSpec, std::result::Result<Gateway, String>)> {
        self.gateways.iter().find(|(s, _)| s.display_name() == label)
    }

    fn stats(&self) -> RunStats {
        RunStats {
            models: self
                .gateways
                .iter()
                .filter_map(|(s, g)| Some((s.display_name().to_string(), g.as_ref().ok()?.stats())))
                .collect(),
            budget_used: self.budget.as_ref().map(|b| b.used()),
            budget_limit: self.budget.as_ref().map(|b| b.limit()),
        }
    }

    fn provenance(&self, cfg: &RunConfig, evalset_checksums: BTreeMap<String, String>) -> Result<Provenance> {
        let dataset_checksums = if self.layout.manifest().exists() {
            read_json::<Manifest>(&self.layout.manifest())?.checksums()
        } else {
            BTreeMap::new()
        };
        Ok(Provenance {
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: cfg.split.seed,
            split: cfg.split,
            label_map: *self.label_map.values(),
            similarity_threshold: cfg.similarity_threshold,
            max_prompt_chars: cfg.max_prompt_chars,
            models: cfg.models.clone(),
            dataset_checksums,
            evalset_checksums,
            parse_failure_rates: BTreeMap::new(),
            token_totals: TokenUsage::default(),
        })
    }
}

fn llm_cell(session: &Session, cfg: &RunConfig, label: &str, pair: &str, instances: &[EvalInstance], v: PromptVariant) -> CellResult {
    let Some((_, gw)) = session.gateway(label) else {
        return CellResult::failed(format!("unknown model {label}"));
    };
    let gw = match gw {
        Ok(g) => g,
        Err(e) => return CellResult::failed(e.clone()),
    };
    log::info!("{pair}: {label} {v}");
    match run_llm_cell(gw, pair, instances, v, &session.cx(cfg)) {
        Ok(c) => c,
        Err(e) => {
            log::error!("{pair}: {label} {v} aborted: {e}");
            CellResult::failed(e.to_string())
        }
    }
}

/// Execute every configured (model × variant) cell and baseline on every
/// pair, then write the report files.
pub fn run_experiment(cfg: &RunConfig) -> Result<RunOutcome> {
    let session = Session::open(cfg)?;
    let variants = cfg.parsed_variants()?;
    let mut rows: Vec<ResultRow> = Vec::new();
    for spec in &cfg.models {
        for &v in &variants {
            rows.push(ResultRow {
                label: row_label(spec.display_name(), v),
                model: spec.display_name().to_string(),
                kind: RowKind::Llm,
                task: v.task,
                variant: Some(v),
                cells: BTreeMap::new(),
            });
        }
    }
    let with_baselines = cfg.baselines.any() && cfg.pairs.iter().any(|p| p.source.is_some());
    if with_baselines {
        let enabled = [cfg.baselines.tgt, cfg.baselines.cmf, cfg.baselines.emcdr];
        for task in [Task::Ranking, Task::Rating] {
            for (name, on) in BASELINE_NAMES.iter().zip(enabled) {
                if on {
                    rows.push(ResultRow {
                        label: name.to_string(),
                        model: name.to_string(),
                        kind: RowKind::Baseline,
                        task,
                        variant: None,
                        cells: BTreeMap::new(),
                    });
                }
            }
        }
    }

    let mut evalset_checksums = BTreeMap::new();
    let mut training_curves = BTreeMap::new();
    for p in &cfg.pairs {
        let (instances, sha) = load_eval_set(cfg, p)?;
        evalset_checksums.insert(p.name.clone(), sha);
        for row in rows.iter_mut().filter(|r| r.kind == RowKind::Llm) {
            let v = row.variant.expect("llm rows carry a variant");
            let cell = llm_cell(&session, cfg, &row.model, &p.name, &instances, v);
            row.cells.insert(p.name.clone(), cell);
        }
        if with_baselines && p.source.is_some() {
            let pc = load_pair_corpus(cfg, &p.name)?;
            let (cells, curves) = run_baselines(cfg, &session.layout, &pc, &instances)?;
            for row in rows.iter_mut().filter(|r| r.kind == RowKind::Baseline) {
                if let Some(c) = cells.get(&(row.model.clone(), row.task)) {
                    row.cells.insert(p.name.clone(), c.clone());
                }
            }
            training_curves.insert(p.name.clone(), curves);
        }
    }

    let mut table = ResultTable {
        pairs: cfg.pairs.iter().map(|p| p.name.clone()).collect(),
        rows,
        training_curves,
        provenance: session.provenance(cfg, evalset_checksums)?,
    };
    table.finish_provenance();
    let stats = session.stats();
    let mut written = emit_report(&table, &session.layout.reports_dir())?;
    let stats_path = session.layout.reports_dir().join("run_stats.json");
    write_json(&stats_path, &stats)?;
    written.push(stats_path);
    Ok(RunOutcome { table, stats, written })
}

/// Write `results.json`, `provenance.json` and one text table per task
/// present in the table.
pub fn emit_report(table: &ResultTable, outdir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(outdir)?;
    let mut written = Vec::new();
    let results = outdir.join("results.json");
    write_json(&results, table)?;
    written.push(results);
    let prov = outdir.join("provenance.json");
    write_json(&prov, &table.provenance)?;
    written.push(prov);
    for (task, name) in [(Task::Ranking, "ranking.txt"), (Task::Rating, "rating.txt")] {
        let path = outdir.join(name);
        if table.rows.iter().any(|r| r.task == task) {
            fs::write(&path, render_task_table(table, task))?;
            written.push(path);
        } else if path.exists() {
            fs::remove_file(&path)?;
        }
    }
    Ok(written)
}

// ---------------------------------------------------------------- ablation

/// High- and medium-context cells of one model on one pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationEntry {
    pub pair: String,
    pub model: String,
    pub rating_high: CellResult,
    pub rating_medium: CellResult,
    pub ranking_high: CellResult,
    pub ranking_medium: CellResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub entries: Vec<AblationEntry>,
    pub provenance: Provenance,
}

impl AblationTable {
    pub fn all_complete(&self) -> bool {
        self.entries.iter().all(|e| {
            [&e.rating_high, &e.rating_medium, &e.ranking_high, &e.ranking_medium]
                .iter()
                .all(|c| c.status == CellStatus::Complete)
        })
    }
}

/// One CSV row per (pair, context, metric), for bar plots.
pub fn ablation_plot_csv(e: &AblationEntry) -> String {
    let mut out = String::from("pair,model,context,metric,value\n");
    for (context, ranking, rating) in [
        ("high", &e.ranking_high, &e.rating_high),
        ("medium", &e.ranking_medium, &e.rating_medium),
    ] {
        let r = ranking.metrics.as_ref();
        let t = rating.metrics.as_ref();
        for (metric, value) in [
            ("MRR@10", r.and_then(|m| m.mrr_at_10)),
            ("NDCG@10", r.and_then(|m| m.ndcg_at_10)),
            ("MAE", t.and_then(|m| m.mae)),
            ("RMSE", t.and_then(|m| m.rmse)),
        ] {
            let v = value.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{context},{metric},{v}\n", csv_field(&e.pair), csv_field(&e.model)));
        }
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Compare high and medium context for the with-injection prompts on every
/// pair, using the configured model per pair (the first model by default).
pub fn run_context_ablation(cfg: &RunConfig) -> Result<(AblationTable, RunStats, Vec<PathBuf>)> {
    let session = Session::open(cfg)?;
    let default_model = cfg
        .models
        .first()
        .map(|m| m.display_name().to_string())
        .ok_or_else(|| Error::Config("the context ablation needs at least one model".into()))?;
    let mut entries = Vec::new();
    let mut evalset_checksums = BTreeMap::new();
    for p in &cfg.pairs {
        let model = cfg.ablation.models.get(&p.name).cloned().unwrap_or_else(|| default_model.clone());
        let (instances, sha) = load_eval_set(cfg, p)?;
        evalset_checksums.insert(p.name.clone(), sha);
        let cell = |task, context| {
            let v = PromptVariant::new(Injection::With, task, context);
            llm_cell(&session, cfg, &model, &p.name, &instances, v)
        };
        entries.push(AblationEntry {
            pair: p.name.clone(),
            model: model.clone(),
            rating_high: cell(Task::Rating, Context::High),
            rating_medium: cell(Task::Rating, Context::Medium),
            ranking_high: cell(Task::Ranking, Context::High),
            ranking_medium: cell(Task::Ranking, Context::Medium),
        });
    }
    let mut provenance = session.provenance(cfg, evalset_checksums)?;
    for e in &entries {
        for (name, c) in [
            ("rating high", &e.rating_high),
            ("rating medium", &e.rating_medium),
            ("ranking high", &e.ranking_high),
            ("ranking medium", &e.ranking_medium),
        ] {
            if let Some(m) = &c.metrics {
                provenance
                    .parse_failure_rates
                    .insert(format!("{} / {} / {name}", e.pair, e.model), m.parse_failure_rate);
            }
            provenance.token_totals.input += c.token_usage.input;
            provenance.token_totals.output += c.token_usage.output;
        }
    }
    let table = AblationTable { entries, provenance };
    let written = emit_ablation(&table, &session.layout.reports_dir())?;
    Ok((table, session.stats(), written))
}

pub fn emit_ablation(table: &AblationTable, outdir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(outdir)?;
    let mut written = Vec::new();
    let json = outdir.join("ablation.json");
    write_json(&json, table)?;
    written.push(json);
    let txt = outdir.join("ablation.txt");
    fs::write(&txt, render_ablation_table(table))?;
    written.push(txt);
    for e in &table.entries {
        let csv = outdir.join(format!("ablation_{}.csv", slug(&e.pair)));
        fs::write(&csv, ablation_plot_csv(e))?;
        written.push(csv);
    }
    Ok(written)
}

// ---------------------------------------------------------------- report / verify

/// Re-render the text tables from the persisted machine-readable results.
pub fn report(output_dir: &Path) -> Result<Vec<PathBuf>> {
    let reports = Layout::new(output_dir).reports_dir();
    let mut written = Vec::new();
    let results = reports.join("results.json");
    if results.exists() {
        let table: ResultTable = read_json(&results)?;
        written.extend(emit_report(&table, &reports)?);
    }
    let ablation = reports.join("ablation.json");
    if ablation.exists() {
        let table: AblationTable = read_json(&ablation)?;
        written.extend(emit_ablation(&table, &reports)?);
    }
    if written.is_empty() {
        return Err(Error::Config(format!("no results found under {}", reports.display())));
    }
    Ok(written)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub cells_checked: usize,
    pub mismatches: Vec<String>,
}

impl VerifyReport {
    pub fn ok(&self) -> bool {
        self.mismatches.is_empty() && self.cells_checked > 0
    }
}

fn verify_cell(root: &Path, what: &str, cell: &CellResult, out: &mut VerifyReport) -> TokenUsage {
    let Some(rel) = &cell.records else {
        return TokenUsage::default();
    };
    out.cells_checked += 1;
    let records = match read_records(&root.join(rel)) {
        Ok(r) => r,
        Err(e) => {
            out.mismatches.push(format!("{what}: {e}"));
            return TokenUsage::default();
        }
    };
    let again = CellResult::from_records(&records, rel.clone(), cell.note.clone());
    if again.metrics != cell.metrics {
        out.mismatches.push(format!(
            "{what}: stored metrics {:?} but records give {:?}",
            cell.metrics, again.metrics
        ));
    }
    if again.status != cell.status || again.instances != cell.instances {
        out.mismatches.push(format!("{what}: status or instance count differs from records"));
    }
    if again.token_usage != cell.token_usage {
        out.mismatches.push(format!("{what}: token usage differs from records"));
    }
    again.token_usage
}

/// Re-aggregate every reported number from its per-instance records and
/// compare, including the token ledger.
pub fn verify(output_dir: &Path) -> Result<VerifyReport> {
    let reports = Layout::new(output_dir).reports_dir();
    let mut out = VerifyReport::default();
    let results = reports.join("results.json");
    if results.exists() {
        let table: ResultTable = read_json(&results)?;
        let mut total = TokenUsage::default();
        for (row, pair, cell) in table.cells() {
            let t = verify_cell(output_dir, &format!("{pair} / {} / {:?}", row.label, row.task), cell, &mut out);
            total.input += t.input;
            total.output += t.output;
        }
        if total != table.provenance.token_totals {
            out.mismatches.push(format!(
                "token ledger: records sum to {total:?}, report says {:?}",
                table.provenance.token_totals
            ));
        }
    }
    let ablation = reports.join("ablation.json");
    if ablation.exists() {
        let table: AblationTable = read_json(&ablation)?;
        for e in &table.entries {
            for (name, c) in [
                ("rating high", &e.rating_high),
                ("rating medium", &e.rating_medium),
                ("ranking high", &e.ranking_high),
                ("ranking medium", &e.ranking_medium),
            ] {
                verify_cell(output_dir, &format!("ablation {} / {name}", e.pair), c, &mut out);
            }
        }
    }
    if !results.exists() && !ablation.exists() {
        return Err(Error::Config(format!("no results found under {}", reports.display())));
    }
    Ok(out)
}
