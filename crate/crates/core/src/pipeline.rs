//! End-to-end answering and batch evaluation.
//!
//! A [`Mode`] decides which stages run for an item:
//!
//! | mode            | query     | retrieval                  | filter |
//! |-----------------|-----------|----------------------------|--------|
//! | `closed_book`   | none      | none                       | no     |
//! | `rag_plain`     | question  | as configured              | no     |
//! | `rag_rationale` | rationale | as configured              | no     |
//! | `rag2_full`     | rationale | balanced, reranked         | yes    |
//! | `ablation:...`  | rationale | strategy named by the mode | opt-in |
//!
//! Rationale modes first generate a closed-book rationale and query with it
//! (answer sentence stripped). Filtered modes fall back to the closed-book
//! answer when the filter rejects every snippet.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{parse_snippet_id, CorpusRegistry, RegistryEntry, Snippet};
use crate::digest::{sha256_hex, DigestBuilder};
use crate::error::{Error, Result};
use crate::filter::{build_filter, filter_pool, FilterKind, FilterScope, FilterSpec, SnippetFilter};
use crate::labeling::LabelingConfig;
use crate::metrics::{bert_score, rouge_l, tokenize, Prf, TOKENIZATION};
use crate::providers::{build_provider, cache_dir_digest, generate, GenerationRequest, Provider, ProviderConfig};
use crate::rationale::{
    extract_answer, rationale_query, Label, McqaItem, PromptTemplate, QueryOptions, RationaleRecord,
    EXTRACTION_PATTERNS_VERSION,
};
use crate::retrieval::{RetrievalConfig, Retriever, SnippetStore, Strategy};
use crate::vindex::{build_index, load_index, save_index, BuildMetadata, VectorIndex};

pub const ANSWER_PROMPT_LAYOUT: &str = "cot-template+documents-prepended";

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Ablation {
    pub strategy: Strategy,
    /// Corpus for the independent strategy.
    pub corpus: Option<String>,
    pub rerank: bool,
    pub filter: bool,
}

/// Written `closed_book`, `rag_plain`, `rag_rationale`, `rag2_full` or
/// `ablation:<strategy>[@corpus][+rerank][+filter]`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Mode {
    ClosedBook,
    RagPlain,
    RagRationale,
    Rag2Full,
    Ablation(Ablation),
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mode::ClosedBook => f.write_str("closed_book"),
            Mode::RagPlain => f.write_str("rag_plain"),
            Mode::RagRationale => f.write_str("rag_rationale"),
            Mode::Rag2Full => f.write_str("rag2_full"),
            Mode::Ablation(a) => {
                let strategy = match a.strategy {
                    Strategy::Balanced => "balanced",
                    Strategy::Stacked => "stacked",
                    Strategy::Independent => "independent",
                };
                write!(f, "ablation:{strategy}")?;
                if let Some(c) = &a.corpus {
                    write!(f, "@{c}")?;
                }
                if a.rerank {
                    f.write_str("+rerank")?;
                }
                if a.filter {
                    f.write_str("+filter")?;
                }
                Ok(())
            }
        }
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "closed_book" => return Ok(Mode::ClosedBook),
            "rag_plain" => return Ok(Mode::RagPlain),
            "rag_rationale" => return Ok(Mode::RagRationale),
            "rag2_full" => return Ok(Mode::Rag2Full),
            _ => {}
        }
        let rest = s
            .strip_prefix("ablation:")
            .ok_or_else(|| Error::Config(format!("unknown mode {s:?}")))?;
        let mut parts = rest.split('+');
        let head = parts.next().unwrap_or_default();
        let (strategy, corpus) = match head.split_once('@') {
            Some((st, c)) if !c.is_empty() => (st, Some(c.to_string())),
            Some(_) => return Err(Error::Config(format!("mode {s:?}: empty corpus name"))),
            None => (head, None),
        };
        let strategy: Strategy = strategy.parse().map_err(|e: Error| Error::Config(e.to_string()))?;
        let mut ablation = Ablation {
            strategy,
            corpus,
            rerank: false,
            filter: false,
        };
        for flag in parts {
            match flag {
                "rerank" => ablation.rerank = true,
                "filter" => ablation.filter = true,
                other => return Err(Error::Config(format!("mode {s:?}: unknown flag {other:?}"))),
            }
        }
        if (strategy == Strategy::Independent) != ablation.corpus.is_some() {
            return Err(Error::Config(format!(
                "mode {s:?}: a corpus is given exactly when the strategy is independent"
            )));
        }
        Ok(Mode::Ablation(ablation))
    }
}

impl TryFrom<String> for Mode {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Mode> for String {
    fn from(m: Mode) -> Self {
        m.to_string()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuerySource {
    Question,
    Rationale,
}

/// The concrete stage list a mode resolves to.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModePlan {
    pub mode: Mode,
    pub query: Option<QuerySource>,
    pub retrieval: Option<RetrievalConfig>,
    pub filter: bool,
}

impl ModePlan {
    pub fn resolve(mode: &Mode, base: &RetrievalConfig) -> Self {
        let (query, retrieval, filter) = match mode {
            Mode::ClosedBook => (None, None, false),
            Mode::RagPlain => (Some(QuerySource::Question), Some(base.clone()), false),
            Mode::RagRationale => (Some(QuerySource::Rationale), Some(base.clone()), false),
            Mode::Rag2Full => {
                let r = RetrievalConfig {
                    strategy: Strategy::Balanced,
                    corpus: None,
                    rerank: true,
                    ..base.clone()
                };
                (Some(QuerySource::Rationale), Some(r), true)
            }
            Mode::Ablation(a) => {
                let r = RetrievalConfig {
                    strategy: a.strategy,
                    corpus: a.corpus.clone(),
                    rerank: a.rerank,
                    ..base.clone()
                };
                (Some(QuerySource::Rationale), Some(r), a.filter)
            }
        };
        Self {
            mode: mode.clone(),
            query,
            retrieval,
            filter,
        }
    }

    fn needs_closed_book(&self) -> bool {
        self.query != Some(QuerySource::Question) || self.filter
    }
}

/// Corpus workspace: `registry.json` plus `<corpus>.snippets.jsonl` and
/// `<corpus>.vidx` per corpus.
#[derive(Clone, Debug)]
pub struct CorpusDir {
    root: PathBuf,
}

impl CorpusDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn registry_path(&self) -> PathBuf {
        self.root.join("registry.json")
    }

    pub fn snippets_path(&self, corpus_id: &str) -> PathBuf {
        self.root.join(format!("{corpus_id}.snippets.jsonl"))
    }

    pub fn index_path(&self, corpus_id: &str) -> PathBuf {
        self.root.join(format!("{corpus_id}.vidx"))
    }

    /// Empty when no registry has been written yet.
    pub fn registry(&self) -> Result<CorpusRegistry> {
        let path = self.registry_path();
        if path.exists() {
            CorpusRegistry::load(&path)
        } else {
            Ok(CorpusRegistry::default())
        }
    }

    /// Stores snippets and registers (or re-registers) the corpus.
    pub fn add_corpus(&self, entry: RegistryEntry, snippets: &[Snippet]) -> Result<()> {
        std::fs::create_dir_all(&self.root)?;
        crate::corpus::write_snippets(&self.snippets_path(&entry.corpus_id), snippets)?;
        let mut registry = self.registry()?;
        registry.entries.retain(|e| e.corpus_id != entry.corpus_id);
        registry.register(entry)?;
        registry.save(&self.registry_path())
    }

    pub fn snippets(&self, corpus_id: &str) -> Result<Vec<Snippet>> {
        if self.registry()?.get(corpus_id).is_none() {
            return Err(Error::Config(format!("corpus {corpus_id} is not registered in {}", self.root.display())));
        }
        crate::corpus::read_snippets(&self.snippets_path(corpus_id))
    }

    pub fn build_index(&self, corpus_id: &str, embedder: &dyn Provider) -> Result<BuildMetadata> {
        let snippets = self.snippets(corpus_id)?;
        let (index, meta) = build_index(&snippets, embedder)?;
        save_index(&index, &self.index_path(corpus_id))?;
        Ok(meta)
    }

    /// Loads snippets and indexes of `corpora` (all registered corpora when
    /// `None`) into a retriever.
    pub fn load_retriever(
        &self,
        corpora: Option<&[String]>,
        embedder: Arc<dyn Provider>,
        reranker: Option<Arc<dyn Provider>>,
    ) -> Result<Retriever> {
        let registry = self.registry()?;
        let ids: Vec<String> = match corpora {
            Some(list) => list.to_vec(),
            None => registry.corpus_ids().map(str::to_string).collect(),
        };
        if ids.is_empty() {
            return Err(Error::Config(format!("no corpora registered in {}", self.root.display())));
        }
        let mut indices: Vec<VectorIndex> = Vec::with_capacity(ids.len());
        let mut snippets = Vec::new();
        for id in &ids {
            snippets.extend(self.snippets(id)?);
            indices.push(load_index(&self.index_path(id))?);
        }
        Retriever::new(indices, SnippetStore::new(snippets), embedder, reranker)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// MCQA items (JSONL).
    pub dataset: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<Mode>,
    /// Abort on the first unparseable dataset line instead of skipping it.
    #[serde(default)]
    pub strict: bool,
    /// Require every provider to sit behind the response cache.
    #[serde(default)]
    pub deterministic: bool,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub longform_template: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus_dir: Option<PathBuf>,
    /// Corpora to search; every registered corpus when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpora: Option<Vec<String>>,
    pub generator: ProviderConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedder: Option<ProviderConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reranker: Option<ProviderConfig>,
    #[serde(default)]
    pub retrieval: RetrievalConfig,
    #[serde(default)]
    pub filter: FilterSpec,
    #[serde(default)]
    pub query: QueryOptions,
    #[serde(default)]
    pub labeling: LabelingConfig,
}

fn default_workers() -> usize {
    4
}
fn default_max_tokens() -> u32 {
    512
}

fn rebase(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

fn rebase_provider(base: &Path, cfg: &mut ProviderConfig) {
    for p in [&mut cfg.fixture, &mut cfg.cache_dir].into_iter().flatten() {
        rebase(base, p);
    }
}

impl RunConfig {
    /// Parses a TOML config. Relative paths are taken relative to the file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        rebase(base, &mut self.dataset);
        for p in [&mut self.template, &mut self.longform_template, &mut self.corpus_dir]
            .into_iter()
            .flatten()
        {
            rebase(base, p);
        }
        rebase_provider(base, &mut self.generator);
        for p in [&mut self.embedder, &mut self.reranker].into_iter().flatten() {
            rebase_provider(base, p);
        }
        if let Some(p) = &mut self.filter.fixture {
            rebase(base, p);
        }
    }

    fn providers(&self) -> impl Iterator<Item = &ProviderConfig> {
        std::iter::once(&self.generator).chain(self.embedder.as_ref()).chain(self.reranker.as_ref())
    }

    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(Error::Config("workers must be >= 1".into()));
        }
        self.retrieval.validate()?;
        self.filter.validate()?;
        for p in self.providers() {
            p.validate()?;
        }
        if self.deterministic {
            if let Some(p) = self.providers().find(|p| p.cache_dir.is_none()) {
                return Err(Error::Config(format!(
                    "deterministic runs need a cache_dir on every provider ({} has none)",
                    p.model_name
                )));
            }
        }
        if let Some(mode) = &self.mode {
            self.validate_mode(mode)?;
        }
        Ok(())
    }

    /// Checks that the configured components cover what `mode` needs.
    pub fn validate_mode(&self, mode: &Mode) -> Result<()> {
        let plan = ModePlan::resolve(mode, &self.retrieval);
        if let Some(r) = &plan.retrieval {
            r.validate()?;
            if self.embedder.is_none() || self.corpus_dir.is_none() {
                return Err(Error::Config(format!("mode {mode} needs an embedder and a corpus_dir")));
            }
            if r.rerank && self.reranker.is_none() {
                return Err(Error::Config(format!("mode {mode} reranks but no reranker is configured")));
            }
        }
        if plan.filter && self.filter.kind == FilterKind::PassThrough {
            return Err(Error::Config(format!("mode {mode} needs a filter (mock or remote)")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageError {
    pub stage: String,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub item_id: String,
    pub mode: Mode,
    /// Text embedded for retrieval; absent in closed-book mode.
    pub query_text: Option<String>,
    #[serde(default)]
    pub query_fell_back: bool,
    /// Candidate pool, in pool order.
    pub retrieved: Vec<String>,
    /// Pool after rerank and final cut; with pool-scoped filtering, the
    /// whole ranked pool the filter judged.
    pub selected: Vec<String>,
    /// Snippets that entered the answering prompt.
    pub kept: Vec<String>,
    pub closed_book_option: Option<Label>,
    pub predicted: Option<Label>,
    pub gold: Label,
    pub correct: bool,
    pub fallback: bool,
    /// Digest of the generation the prediction was extracted from.
    pub rationale_digest: Option<String>,
    pub error: Option<StageError>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageTime {
    pub stage: String,
    pub seconds: f64,
}

/// Wall-clock stage durations; kept out of the prediction records so replayed
/// runs produce identical prediction files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemTiming {
    pub item_id: String,
    pub stages: Vec<StageTime>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemOutcome {
    pub record: PredictionRecord,
    pub timing: ItemTiming,
}

/// Everything the stages produced for one question, filled in as they run.
#[derive(Debug, Default)]
struct Trace {
    closed_text: Option<String>,
    query_text: Option<String>,
    query_fell_back: bool,
    retrieved: Vec<String>,
    selected: Vec<String>,
    kept: Vec<String>,
    fallback: bool,
    final_text: Option<String>,
    stages: Vec<StageTime>,
}

impl Trace {
    fn timed<T>(&mut self, stage: &str, f: impl FnOnce() -> Result<T>) -> std::result::Result<T, StageError> {
        let start = Instant::now();
        let out = f();
        self.stages.push(StageTime {
            stage: stage.to_string(),
            seconds: start.elapsed().as_secs_f64(),
        });
        out.map_err(|e| StageError {
            stage: stage.to_string(),
            message: e.to_string(),
        })
    }
}

pub struct Engine {
    generator: Arc<dyn Provider>,
    retriever: Option<Retriever>,
    filter: Option<Box<dyn SnippetFilter>>,
    filter_scope: FilterScope,
    template: PromptTemplate,
    longform_template: PromptTemplate,
    max_tokens: u32,
    query: QueryOptions,
    base_retrieval: RetrievalConfig,
    workers: usize,
    cache_dirs: Vec<PathBuf>,
}

impl Engine {
    pub fn new(generator: Arc<dyn Provider>) -> Self {
        Self {
            generator,
            retriever: None,
            filter: None,
            filter_scope: FilterScope::Selected,
            template: PromptTemplate::mcqa(),
            longform_template: PromptTemplate::longform(),
            max_tokens: default_max_tokens(),
            query: QueryOptions::default(),
            base_retrieval: RetrievalConfig::default(),
            workers: default_workers(),
            cache_dirs: Vec::new(),
        }
    }

    pub fn with_retriever(mut self, retriever: Retriever) -> Self {
        self.retriever = Some(retriever);
        self
    }

    pub fn with_filter(mut self, filter: Box<dyn SnippetFilter>) -> Self {
        self.filter = Some(filter);
        self
    }

    pub fn with_filter_scope(mut self, scope: FilterScope) -> Self {
        self.filter_scope = scope;
        self
    }

    pub fn with_template(mut self, template: PromptTemplate) -> Self {
        self.template = template;
        self
    }

    pub fn with_longform_template(mut self, template: PromptTemplate) -> Self {
        self.longform_template = template;
        self
    }

    pub fn with_retrieval(mut self, cfg: RetrievalConfig) -> Self {
        self.base_retrieval = cfg;
        self
    }

    pub fn with_query_options(mut self, opts: QueryOptions) -> Self {
        self.query = opts;
        self
    }

    pub fn with_max_tokens(mut self, max_tokens: u32) -> Self {
        self.max_tokens = max_tokens;
        self
    }

    pub fn with_workers(mut self, workers: usize) -> Self {
        self.workers = workers.max(1);
        self
    }

    /// Cache directories summarised in report provenance.
    pub fn with_cache_dirs(mut self, dirs: Vec<PathBuf>) -> Self {
        self.cache_dirs = dirs;
        self
    }

    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let generator = build_provider(&cfg.generator)?;
        let mut engine = Engine::new(generator)
            .with_retrieval(cfg.retrieval.clone())
            .with_query_options(cfg.query)
            .with_max_tokens(cfg.max_tokens)
            .with_workers(cfg.workers);
        if let Some(path) = &cfg.template {
            engine = engine.with_template(PromptTemplate::from_file(path)?);
        }
        if let Some(path) = &cfg.longform_template {
            engine = engine.with_longform_template(PromptTemplate::from_file(path)?);
        }
        if let (Some(embedder), Some(dir)) = (&cfg.embedder, &cfg.corpus_dir) {
            let embedder = build_provider(embedder)?;
            let reranker = cfg.reranker.as_ref().map(build_provider).transpose()?;
            let retriever = CorpusDir::new(dir).load_retriever(cfg.corpora.as_deref(), embedder, reranker)?;
            engine = engine.with_retriever(retriever);
        }
        if cfg.filter.kind != FilterKind::PassThrough {
            engine = engine.with_filter(build_filter(&cfg.filter)?).with_filter_scope(cfg.filter.scope);
        }
        let mut dirs: Vec<PathBuf> = cfg.providers().filter_map(|p| p.cache_dir.clone()).collect();
        dirs.sort();
        dirs.dedup();
        Ok(engine.with_cache_dirs(dirs))
    }

    pub fn generator(&self) -> &Arc<dyn Provider> {
        &self.generator
    }

    pub fn retriever(&self) -> Option<&Retriever> {
        self.retriever.as_ref()
    }

    pub fn template(&self) -> &PromptTemplate {
        &self.template
    }

    pub fn plan(&self, mode: &Mode) -> ModePlan {
        ModePlan::resolve(mode, &self.base_retrieval)
    }

    /// Fails when the engine lacks a component the plan needs.
    pub fn check_plan(&self, plan: &ModePlan) -> Result<()> {
        if let Some(r) = &plan.retrieval {
            r.validate()?;
            let retriever = self
                .retriever
                .as_ref()
                .ok_or_else(|| Error::Config(format!("mode {} needs indexes and an embedder", plan.mode)))?;
            if r.rerank && !retriever.has_reranker() {
                return Err(Error::Config(format!("mode {} reranks but no reranker is configured", plan.mode)));
            }
        }
        if plan.filter && self.filter.is_none() {
            return Err(Error::Config(format!("mode {} needs a snippet filter", plan.mode)));
        }
        Ok(())
    }

    fn complete(&self, prompt: String) -> Result<String> {
        let text = generate(self.generator.as_ref(), &GenerationRequest::greedy(prompt, self.max_tokens))?;
        if text.trim().is_empty() {
            return Err(Error::EmptyGeneration);
        }
        Ok(text)
    }

    /// Runs the stages of `plan` for one question. `initial_query` is what the
    /// template receives; `question` is what reranker and filter see.
    fn run_stages(
        &self,
        id: &str,
        question: &str,
        initial_query: &str,
        template: &PromptTemplate,
        plan: &ModePlan,
        trace: &mut Trace,
    ) -> std::result::Result<(), StageError> {
        if plan.needs_closed_book() {
            let text = trace.timed("closed_book", || self.complete(template.render(initial_query, &[])))?;
            trace.closed_text = Some(text);
        }
        let (Some(source), Some(rcfg)) = (plan.query, &plan.retrieval) else {
            trace.final_text = trace.closed_text.clone();
            return Ok(());
        };
        let retriever = self.retriever.as_ref().ok_or_else(|| StageError {
            stage: "retrieval".into(),
            message: "no retriever configured".into(),
        })?;

        let query = match source {
            QuerySource::Question => question.to_string(),
            QuerySource::Rationale => {
                let record = RationaleRecord {
                    item_id: id.to_string(),
                    rationale_text: trace.closed_text.clone().unwrap_or_default(),
                    extracted_option: None,
                    with_snippets: Vec::new(),
                    prompt_digest: String::new(),
                };
                let q = trace.timed("query", || rationale_query(&record, question, self.query))?;
                if let Some(w) = &q.warning {
                    warn!("{id}: {w}");
                }
                trace.query_fell_back = q.fell_back_to_question;
                q.text
            }
        };
        trace.query_text = Some(query.clone());

        let retrieval = trace.timed("retrieval", || retriever.retrieve(&query, question, rcfg))?;
        trace.retrieved = retrieval.pool.ids();
        let judge_pool = plan.filter && self.filter_scope == FilterScope::Pool;
        let candidates = if judge_pool { &retrieval.ranked } else { &retrieval.selected };
        trace.selected = candidates.iter().map(|s| s.snippet_id.clone()).collect();
        let selected: Vec<(Snippet, _)> = trace.timed("retrieval", || {
            candidates
                .iter()
                .map(|s| Ok((retriever.store().get(&s.snippet_id)?.clone(), s.clone())))
                .collect::<Result<Vec<_>>>()
        })?;

        let kept: Vec<Snippet> = match (&self.filter, plan.filter) {
            (Some(filter), true) => {
                let outcome = trace.timed("filter", || filter_pool(filter.as_ref(), question, &selected))?;
                let mut kept = outcome.kept_snippets();
                kept.truncate(rcfg.final_k);
                kept
            }
            (None, true) => {
                return Err(StageError {
                    stage: "filter".into(),
                    message: "no snippet filter configured".into(),
                })
            }
            _ => selected.into_iter().map(|(s, _)| s).collect(),
        };
        trace.kept = kept.iter().map(|s| s.snippet_id.clone()).collect();

        if kept.is_empty() && plan.filter {
            trace.fallback = true;
            trace.final_text = trace.closed_text.clone();
            return Ok(());
        }
        let text = trace.timed("answer", || self.complete(template.render(initial_query, &kept)))?;
        trace.final_text = Some(text);
        Ok(())
    }

    /// Answers one item. Stage failures are recorded on the returned record.
    pub fn run_item(&self, item: &McqaItem, plan: &ModePlan) -> ItemOutcome {
        let mut trace = Trace::default();
        let result = match item.validate() {
            Ok(()) => self.run_stages(
                &item.item_id,
                &item.question,
                &item.initial_query(),
                &self.template,
                plan,
                &mut trace,
            ),
            Err(e) => Err(StageError {
                stage: "validate".into(),
                message: e.to_string(),
            }),
        };
        let error = result.err();
        if let Some(e) = &error {
            warn!("{}: stage {} failed: {}", item.item_id, e.stage, e.message);
        }
        let closed_book_option = trace.closed_text.as_deref().and_then(|t| extract_answer(t, &item.options));
        let predicted = match (&error, &trace.final_text) {
            (None, Some(text)) => extract_answer(text, &item.options),
            _ => None,
        };
        let record = PredictionRecord {
            item_id: item.item_id.clone(),
            mode: plan.mode.clone(),
            query_text: trace.query_text,
            query_fell_back: trace.query_fell_back,
            retrieved: trace.retrieved,
            selected: trace.selected,
            kept: trace.kept,
            closed_book_option,
            predicted,
            gold: item.gold,
            correct: predicted == Some(item.gold),
            fallback: trace.fallback,
            rationale_digest: trace.final_text.as_deref().filter(|_| error.is_none()).map(sha256_hex),
            error,
        };
        ItemOutcome {
            record,
            timing: ItemTiming {
                item_id: item.item_id.clone(),
                stages: trace.stages,
            },
        }
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.workers)
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))
    }

    fn identity(&self, plan: &ModePlan) -> Identity {
        let retriever = self.retriever.as_ref();
        Identity {
            plan: plan.clone(),
            generator: self.generator.model_name().to_string(),
            embedder: retriever.map(|r| r.embedder().model_name().to_string()),
            corpora: retriever.map(|r| r.indices().iter().map(|i| i.corpus_id().to_string()).collect()),
            index_fingerprints: retriever.map(|r| r.indices().iter().map(crate::vindex::index_digest).collect()),
            filter_id: self.filter.as_ref().filter(|_| plan.filter).map(|f| f.filter_id().to_string()),
            filter_scope: Some(self.filter_scope).filter(|_| plan.filter),
            template_digest: self.template.digest().to_string(),
            max_tokens: self.max_tokens,
            query: self.query,
        }
    }

    fn cache_digest(&self) -> Result<Option<String>> {
        if self.cache_dirs.is_empty() {
            return Ok(None);
        }
        let mut b = DigestBuilder::new();
        for d in &self.cache_dirs {
            b = b.part(if d.exists() { cache_dir_digest(d)? } else { String::new() });
        }
        Ok(Some(b.finish()))
    }
}

/// Inputs that determine a run's outputs, hashed into the config digest.
#[derive(Serialize)]
struct Identity {
    plan: ModePlan,
    generator: String,
    embedder: Option<String>,
    corpora: Option<Vec<String>>,
    index_fingerprints: Option<Vec<String>>,
    filter_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    filter_scope: Option<FilterScope>,
    template_digest: String,
    max_tokens: u32,
    query: QueryOptions,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InvalidLine {
    pub line: usize,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub digest: String,
    pub items: Vec<McqaItem>,
    pub invalid: Vec<InvalidLine>,
}

impl Dataset {
    /// Reads MCQA JSONL. Bad lines (unparseable, invalid or duplicate ids) are
    /// listed in `invalid`; with `strict` the first one is an error instead.
    pub fn load(path: &Path, strict: bool) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let text = String::from_utf8(bytes.clone()).map_err(|e| Error::Ingest {
            path: path.to_path_buf(),
            line: 0,
            message: e.to_string(),
        })?;
        let mut items = Vec::new();
        let mut invalid = Vec::new();
        let mut seen = HashSet::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parsed = serde_json::from_str::<McqaItem>(line)
                .map_err(|e| e.to_string())
                .and_then(|item| item.validate().map(|_| item).map_err(|e| e.to_string()))
                .and_then(|item| {
                    if seen.insert(item.item_id.clone()) {
                        Ok(item)
                    } else {
                        Err(format!("duplicate item_id {}", item.item_id))
                    }
                });
            match parsed {
                Ok(item) => items.push(item),
                Err(message) if strict => {
                    return Err(Error::Ingest {
                        path: path.to_path_buf(),
                        line: i + 1,
                        message,
                    })
                }
                Err(message) => invalid.push(InvalidLine { line: i + 1, message }),
            }
        }
        if !invalid.is_empty() {
            warn!("{}: skipped {} invalid line(s)", path.display(), invalid.len());
        }
        Ok(Self {
            name: path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
            digest: sha256_hex(&bytes),
            items,
            invalid,
        })
    }

    pub fn from_items(name: &str, items: Vec<McqaItem>) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut b = DigestBuilder::new();
        for item in &items {
            item.validate()?;
            if !seen.insert(item.item_id.as_str()) {
                return Err(Error::invalid(format!("duplicate item_id {}", item.item_id)));
            }
            b = b.part(serde_json::to_vec(item)?);
        }
        Ok(Self {
            name: name.to_string(),
            digest: b.finish(),
            items,
            invalid: Vec::new(),
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusCounts {
    pub retrieved: BTreeMap<String, usize>,
    pub selected: BTreeMap<String, usize>,
    pub kept: BTreeMap<String, usize>,
}

fn count_corpora(target: &mut BTreeMap<String, usize>, ids: &[String]) {
    for id in ids {
        let corpus = parse_snippet_id(id).map(|(c, _, _)| c).unwrap_or_else(|_| "?".into());
        *target.entry(corpus).or_default() += 1;
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub crate_version: String,
    pub generator: String,
    pub embedder: Option<String>,
    pub filter_id: Option<String>,
    pub template_digest: String,
    pub answer_prompt: String,
    pub extraction_patterns: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub dataset_digest: String,
    pub mode: Mode,
    pub n_items: usize,
    pub n_correct: usize,
    pub accuracy: f64,
    pub abstentions: usize,
    pub abstention_rate: f64,
    pub fallbacks: usize,
    pub errors: usize,
    pub invalid_lines: Vec<InvalidLine>,
    pub corpus_counts: CorpusCounts,
    pub config_digest: String,
    pub cache_digest: Option<String>,
    pub predictions_digest: String,
    pub provenance: Provenance,
}

impl EvalReport {
    /// Aggregates records. Order of `records` does not matter.
    pub fn from_records(records: &[PredictionRecord], mode: &Mode, dataset: &Dataset) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::invalid(format!("dataset {} has no valid items", dataset.name)));
        }
        let n = records.len();
        let n_correct = records.iter().filter(|r| r.correct).count();
        let abstentions = records.iter().filter(|r| r.predicted.is_none()).count();
        let mut counts = CorpusCounts::default();
        for r in records {
            count_corpora(&mut counts.retrieved, &r.retrieved);
            count_corpora(&mut counts.selected, &r.selected);
            count_corpora(&mut counts.kept, &r.kept);
        }
        Ok(Self {
            dataset: dataset.name.clone(),
            dataset_digest: dataset.digest.clone(),
            mode: mode.clone(),
            n_items: n,
            n_correct,
            accuracy: n_correct as f64 / n as f64,
            abstentions,
            abstention_rate: abstentions as f64 / n as f64,
            fallbacks: records.iter().filter(|r| r.fallback).count(),
            errors: records.iter().filter(|r| r.error.is_some()).count(),
            invalid_lines: dataset.invalid.clone(),
            corpus_counts: counts,
            config_digest: String::new(),
            cache_digest: None,
            predictions_digest: String::new(),
            provenance: Provenance {
                crate_version: env!("CARGO_PKG_VERSION").to_string(),
                generator: String::new(),
                embedder: None,
                filter_id: None,
                template_digest: String::new(),
                answer_prompt: ANSWER_PROMPT_LAYOUT.to_string(),
                extraction_patterns: EXTRACTION_PATTERNS_VERSION.to_string(),
            },
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub report: EvalReport,
    /// Sorted by item_id.
    pub predictions: Vec<PredictionRecord>,
    pub timings: Vec<ItemTiming>,
}

pub fn predictions_jsonl(records: &[PredictionRecord]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    Ok(out)
}

/// `report.json` -> `report.<suffix>`.
pub fn sibling_path(report: &Path, suffix: &str) -> PathBuf {
    let stem = report.file_stem().unwrap_or_default().to_string_lossy();
    report.with_file_name(format!("{stem}.{suffix}"))
}

impl Evaluation {
    pub fn predictions_jsonl(&self) -> Result<Vec<u8>> {
        predictions_jsonl(&self.predictions)
    }

    pub fn report_json(&self) -> Result<Vec<u8>> {
        let mut bytes = serde_json::to_vec_pretty(&self.report)?;
        bytes.push(b'\n');
        Ok(bytes)
    }

    /// Writes the report plus `<stem>.predictions.jsonl` and
    /// `<stem>.timing.jsonl` next to it.
    pub fn write(&self, report_path: &Path) -> Result<()> {
        if let Some(parent) = report_path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(report_path, self.report_json()?)?;
        std::fs::write(sibling_path(report_path, "predictions.jsonl"), self.predictions_jsonl()?)?;
        crate::io::write_jsonl(&sibling_path(report_path, "timing.jsonl"), &self.timings)
    }
}

/// Runs every item of `dataset` under `mode` and aggregates the report.
pub fn evaluate(engine: &Engine, dataset: &Dataset, mode: &Mode) -> Result<Evaluation> {
    let plan = engine.plan(mode);
    engine.check_plan(&plan)?;
    info!("evaluating {} items of {} in mode {mode}", dataset.items.len(), dataset.name);
    let mut outcomes: Vec<ItemOutcome> = engine
        .pool()?
        .install(|| dataset.items.par_iter().map(|item| engine.run_item(item, &plan)).collect());
    outcomes.sort_by(|a, b| a.record.item_id.cmp(&b.record.item_id));
    let (predictions, timings): (Vec<_>, Vec<_>) = outcomes.into_iter().map(|o| (o.record, o.timing)).unzip();

    let identity = engine.identity(&plan);
    let mut report = EvalReport::from_records(&predictions, mode, dataset)?;
    report.config_digest = sha256_hex(serde_json::to_vec(&identity)?);
    report.cache_digest = engine.cache_digest()?;
    report.predictions_digest = sha256_hex(predictions_jsonl(&predictions)?);
    report.provenance.generator = identity.generator;
    report.provenance.embedder = identity.embedder;
    report.provenance.filter_id = identity.filter_id;
    report.provenance.template_digest = identity.template_digest;
    Ok(Evaluation {
        report,
        predictions,
        timings,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub mode: Mode,
    pub accuracy: f64,
    pub n_correct: usize,
    pub n_items: usize,
    pub abstention_rate: f64,
    pub fallbacks: usize,
    /// Snippets retrieved per corpus, summed over items.
    pub retrieved_per_corpus: BTreeMap<String, usize>,
    pub kept_per_corpus: BTreeMap<String, usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
    pub evaluations: Vec<Evaluation>,
}

/// One evaluation per mode over shared providers and indexes.
pub fn compare_modes(engine: &Engine, dataset: &Dataset, modes: &[Mode]) -> Result<Comparison> {
    if modes.is_empty() {
        return Err(Error::invalid("no modes to compare"));
    }
    for m in modes {
        engine.check_plan(&engine.plan(m))?;
    }
    let evaluations = modes
        .iter()
        .map(|m| evaluate(engine, dataset, m))
        .collect::<Result<Vec<_>>>()?;
    let rows = evaluations
        .iter()
        .map(|e| ComparisonRow {
            mode: e.report.mode.clone(),
            accuracy: e.report.accuracy,
            n_correct: e.report.n_correct,
            n_items: e.report.n_items,
            abstention_rate: e.report.abstention_rate,
            fallbacks: e.report.fallbacks,
            retrieved_per_corpus: e.report.corpus_counts.retrieved.clone(),
            kept_per_corpus: e.report.corpus_counts.kept.clone(),
        })
        .collect();
    Ok(Comparison { rows, evaluations })
}

impl Comparison {
    /// Plain-text table, one row per mode.
    pub fn table(&self) -> String {
        let mut out = format!("{:<32} {:>8} {:>9} {:>9}  retrieved per corpus\n", "mode", "accuracy", "correct", "fallback");
        for r in &self.rows {
            let hist: Vec<String> = r.retrieved_per_corpus.iter().map(|(c, n)| format!("{c}={n}")).collect();
            out.push_str(&format!(
                "{:<32} {:>8.4} {:>5}/{:<3} {:>9}  {}\n",
                r.mode.to_string(),
                r.accuracy,
                r.n_correct,
                r.n_items,
                r.fallbacks,
                hist.join(" ")
            ));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LongformPair {
    #[serde(default)]
    pub id: Option<String>,
    pub question: String,
    pub reference: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LongformScore {
    pub id: String,
    pub rouge_l: Prf,
    pub bert_score: Prf,
    pub generation_digest: Option<String>,
    pub kept: Vec<String>,
    pub error: Option<StageError>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LongformReport {
    pub mode: Mode,
    pub n_pairs: usize,
    pub mean_rouge_l: Prf,
    pub mean_bert_score: Prf,
    pub tokenization: String,
    pub bert_score_embedder: String,
    pub pairs: Vec<LongformScore>,
}

fn mean_prf(scores: impl Iterator<Item = Prf> + Clone) -> Prf {
    let n = scores.clone().count().max(1) as f64;
    let (p, r, f) = scores.fold((0.0, 0.0, 0.0), |(p, r, f), s| (p + s.precision, r + s.recall, f + s.f1));
    Prf {
        precision: p / n,
        recall: r / n,
        f1: f / n,
    }
}

impl Engine {
    /// Long-form answers under `mode`, scored against references. An empty or
    /// failed generation scores zero and still counts.
    pub fn longform_eval(&self, pairs: &[LongformPair], mode: &Mode, embedder: &dyn Provider) -> Result<LongformReport> {
        if let Some(p) = pairs.iter().find(|p| p.reference.trim().is_empty()) {
            return Err(Error::invalid(format!("pair {:?} has an empty reference", p.id)));
        }
        let plan = self.plan(mode);
        self.check_plan(&plan)?;
        let ids: Vec<String> = pairs
            .iter()
            .enumerate()
            .map(|(i, p)| p.id.clone().unwrap_or_else(|| format!("lf-{:04}", i + 1)))
            .collect();
        let scores = self.pool()?.install(|| {
            pairs
                .par_iter()
                .zip(&ids)
                .map(|(pair, id)| {
                    let mut trace = Trace::default();
                    let outcome = self.run_stages(id, &pair.question, &pair.question, &self.longform_template, &plan, &mut trace);
                    let (text, error) = match outcome {
                        Ok(()) => (trace.final_text.unwrap_or_default(), None),
                        Err(e) if e.message == Error::EmptyGeneration.to_string() => (String::new(), None),
                        Err(e) => (String::new(), Some(e)),
                    };
                    let cand = tokenize(&text);
                    let reference = tokenize(&pair.reference);
                    let bert = bert_score(&cand, &reference, embedder)?;
                    Ok(LongformScore {
                        id: id.clone(),
                        rouge_l: rouge_l(&text, &pair.reference),
                        bert_score: bert,
                        generation_digest: (!text.is_empty()).then(|| sha256_hex(&text)),
                        kept: trace.kept,
                        error,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })?;
        Ok(LongformReport {
            mode: mode.clone(),
            n_pairs: scores.len(),
            mean_rouge_l: mean_prf(scores.iter().map(|s| s.rouge_l)),
            mean_bert_score: mean_prf(scores.iter().map(|s| s.bert_score)),
            tokenization: TOKENIZATION.to_string(),
            bert_score_embedder: embedder.model_name().to_string(),
            pairs: scores,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_strings_round_trip() {
        for s in [
            "closed_book",
            "rag_plain",
            "rag_rationale",
            "rag2_full",
            "ablation:stacked",
            "ablation:stacked+rerank",
            "ablation:balanced+rerank+filter",
            "ablation:independent@pubmed",
        ] {
            let m: Mode = s.parse().unwrap();
            assert_eq!(m.to_string(), s);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(serde_json::from_str::<Mode>(&json).unwrap(), m);
        }
        for bad in ["rag3", "ablation:independent", "ablation:stacked@x", "ablation:stacked+magic", "ablation:"] {
            assert!(bad.parse::<Mode>().is_err(), "{bad}");
        }
    }

    #[test]
    fn rag2_full_forces_balanced_reranked_retrieval() {
        let base = RetrievalConfig {
            strategy: Strategy::Stacked,
            rerank: false,
            ..RetrievalConfig::default()
        };
        let plan = ModePlan::resolve(&Mode::Rag2Full, &base);
        let r = plan.retrieval.unwrap();
        assert_eq!((r.strategy, r.rerank), (Strategy::Balanced, true));
        assert!(plan.filter);
        assert_eq!(plan.query, Some(QuerySource::Rationale));

        let closed = ModePlan::resolve(&Mode::ClosedBook, &base);
        assert!(closed.retrieval.is_none() && closed.query.is_none() && !closed.filter);
        assert!(!ModePlan::resolve(&Mode::RagPlain, &base).needs_closed_book());
    }

    #[test]
    fn config_rejects_unknown_keys_and_missing_components() {
        let text = r#"
            dataset = "items.jsonl"
            surprise = 1
            [generator]
            kind = "scripted"
            fixture = "fx.jsonl"
            model_name = "m"
        "#;
        assert!(toml::from_str::<RunConfig>(text).is_err());

        let text = r#"
            dataset = "items.jsonl"
            mode = "rag2_full"
            [generator]
            kind = "scripted"
            fixture = "fx.jsonl"
            model_name = "m"
        "#;
        let cfg: RunConfig = toml::from_str(text).unwrap();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn config_paths_are_relative_to_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(
            &path,
            "dataset = \"items.jsonl\"\n[generator]\nkind = \"scripted\"\nfixture = \"fx.jsonl\"\nmodel_name = \"m\"\n",
        )
        .unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.dataset, dir.path().join("items.jsonl"));
        assert_eq!(cfg.generator.fixture.unwrap(), dir.path().join("fx.jsonl"));
    }

    #[test]
    fn deterministic_flag_requires_caches() {
        let mut cfg: RunConfig = toml::from_str(
            "dataset = \"d\"\ndeterministic = true\n[generator]\nkind = \"scripted\"\nfixture = \"f\"\nmodel_name = \"m\"\n",
        )
        .unwrap();
        assert!(cfg.validate().is_err());
        cfg.generator.cache_dir = Some("cache".into());
        cfg.validate().unwrap();
    }

    #[test]
    fn dataset_lenient_and_strict() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("items.jsonl");
        let good = r#"{"item_id":"1","question":"q?","options":{"A":"a","B":"b","C":"c","D":"d"},"gold":"A"}"#;
        std::fs::write(&path, format!("{good}\nnot json\n{good}\n")).unwrap();
        let ds = Dataset::load(&path, false).unwrap();
        assert_eq!(ds.items.len(), 1);
        assert_eq!(ds.invalid.iter().map(|l| l.line).collect::<Vec<_>>(), vec![2, 3]);
        assert!(matches!(Dataset::load(&path, true), Err(Error::Ingest { line: 2, .. })));
    }

    #[test]
    fn sibling_paths() {
        assert_eq!(
            sibling_path(Path::new("out/report.json"), "predictions.jsonl"),
            Path::new("out/report.predictions.jsonl")
        );
    }
}
