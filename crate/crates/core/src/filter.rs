//! Snippet filtering: a verdict on whether a retrieved snippet should enter
//! the answering prompt.
//!
//! Every built-in filter reports a score in `[0, 1]` and sets
//! `helpful = score >= decision_threshold`. The remote filter speaks:
//!
//! ```text
//! POST /v1/verdict  {"pairs": [{"question", "snippet", "snippet_id"}, ...]}
//!   -> {"verdicts": [{"snippet_id", "score", "helpful"}, ...]}   (request order)
//! GET  /v1/health   -> {"status": "ok", "filter_id": ...}
//! ```

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::time::Duration;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::corpus::Snippet;
use crate::error::{Error, Result};
use crate::providers::{HttpTransport, RetryPolicy};
use crate::vindex::ScoredSnippet;

pub const DEFAULT_DECISION_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterVerdict {
    pub snippet_id: String,
    pub helpful: bool,
    pub score: f64,
    pub filter_id: String,
}

pub trait SnippetFilter: Send + Sync {
    /// Identity including the decision threshold, e.g. `mock@0.5`.
    fn filter_id(&self) -> &str;

    fn decision_threshold(&self) -> f64;

    /// Helpfulness scores in `[0, 1]`, one per snippet, in input order.
    fn score_batch(&self, question: &str, snippets: &[&Snippet]) -> Result<Vec<f64>>;
}

fn to_verdicts(filter: &dyn SnippetFilter, snippets: &[&Snippet], scores: Vec<f64>) -> Result<Vec<FilterVerdict>> {
    if scores.len() != snippets.len() {
        return Err(Error::protocol(format!(
            "filter returned {} scores for {} snippets",
            scores.len(),
            snippets.len()
        )));
    }
    let threshold = filter.decision_threshold();
    snippets
        .iter()
        .zip(scores)
        .map(|(s, score)| {
            if !(0.0..=1.0).contains(&score) {
                return Err(Error::protocol(format!("filter score {score} outside [0, 1]")));
            }
            Ok(FilterVerdict {
                snippet_id: s.snippet_id.clone(),
                helpful: score >= threshold,
                score,
                filter_id: filter.filter_id().to_string(),
            })
        })
        .collect()
}

pub fn verdict(filter: &dyn SnippetFilter, question: &str, snippet: &Snippet) -> Result<FilterVerdict> {
    if question.trim().is_empty() || snippet.text.trim().is_empty() {
        return Err(Error::invalid("filter needs a non-empty question and snippet"));
    }
    let scores = filter.score_batch(question, &[snippet])?;
    Ok(to_verdicts(filter, &[snippet], scores)?.remove(0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Judged {
    pub snippet: Snippet,
    pub scored: ScoredSnippet,
    pub verdict: FilterVerdict,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterOutcome {
    pub kept: Vec<Judged>,
    pub dropped: Vec<Judged>,
}

impl FilterOutcome {
    pub fn kept_ids(&self) -> Vec<String> {
        self.kept.iter().map(|j| j.snippet.snippet_id.clone()).collect()
    }

    pub fn kept_snippets(&self) -> Vec<Snippet> {
        self.kept.iter().map(|j| j.snippet.clone()).collect()
    }
}

const FILTER_BATCH: usize = 32;

/// Splits a ranked list into kept and dropped snippets, preserving order.
/// On failure the error carries the verdicts obtained before it.
pub fn filter_pool(
    filter: &dyn SnippetFilter,
    question: &str,
    ranked: &[(Snippet, ScoredSnippet)],
) -> Result<FilterOutcome> {
    let mut verdicts: Vec<FilterVerdict> = Vec::with_capacity(ranked.len());
    for chunk in ranked.chunks(FILTER_BATCH) {
        let snippets: Vec<&Snippet> = chunk.iter().map(|(s, _)| s).collect();
        let batch = filter
            .score_batch(question, &snippets)
            .and_then(|scores| to_verdicts(filter, &snippets, scores));
        match batch {
            Ok(v) => verdicts.extend(v),
            Err(Error::FilterUnavailable { message, .. }) => {
                return Err(Error::FilterUnavailable {
                    message,
                    partial: verdicts,
                })
            }
            Err(e) => return Err(e),
        }
    }
    let mut outcome = FilterOutcome::default();
    for ((snippet, scored), verdict) in ranked.iter().cloned().zip(verdicts) {
        let judged = Judged {
            snippet,
            scored,
            verdict,
        };
        if judged.verdict.helpful {
            outcome.kept.push(judged);
        } else {
            outcome.dropped.push(judged);
        }
    }
    Ok(outcome)
}

/// Keeps everything.
#[derive(Clone, Debug)]
pub struct PassThrough {
    id: String,
}

impl Default for PassThrough {
    fn default() -> Self {
        Self {
            id: format!("pass_through@{DEFAULT_DECISION_THRESHOLD}"),
        }
    }
}

impl SnippetFilter for PassThrough {
    fn filter_id(&self) -> &str {
        &self.id
    }

    fn decision_threshold(&self) -> f64 {
        DEFAULT_DECISION_THRESHOLD
    }

    fn score_batch(&self, _question: &str, snippets: &[&Snippet]) -> Result<Vec<f64>> {
        Ok(vec![1.0; snippets.len()])
    }
}

/// One line of a mock filter fixture. Without `question` the score applies
/// to the snippet under any question; snippet id `*` without a question sets
/// the score of every unlisted pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question: Option<String>,
    pub snippet_id: String,
    pub score: f64,
}

/// Fixture-table filter. Unknown pairs are an error unless a default score
/// is set.
#[derive(Clone, Debug)]
pub struct MockFilter {
    id: String,
    threshold: f64,
    pairs: HashMap<(String, String), f64>,
    any_question: HashMap<String, f64>,
    default_score: Option<f64>,
}

impl MockFilter {
    pub fn new(threshold: f64) -> Self {
        Self {
            id: format!("mock@{threshold}"),
            threshold,
            pairs: HashMap::new(),
            any_question: HashMap::new(),
            default_score: None,
        }
    }

    pub fn with_pair(mut self, question: &str, snippet_id: &str, score: f64) -> Self {
        self.pairs.insert((question.to_string(), snippet_id.to_string()), score);
        self
    }

    pub fn with_snippet(mut self, snippet_id: &str, score: f64) -> Self {
        self.any_question.insert(snippet_id.to_string(), score);
        self
    }

    pub fn with_default(mut self, score: f64) -> Self {
        self.default_score = Some(score);
        self
    }

    pub fn insert(&mut self, entry: MockEntry) {
        match entry.question {
            Some(q) => self.pairs.insert((q, entry.snippet_id), entry.score),
            None if entry.snippet_id == "*" => {
                self.default_score = Some(entry.score);
                None
            }
            None => self.any_question.insert(entry.snippet_id, entry.score),
        };
    }

    pub fn from_jsonl(path: &Path, threshold: f64) -> Result<Self> {
        let mut filter = Self::new(threshold);
        for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: MockEntry = serde_json::from_str(&line).map_err(|e| Error::Ingest {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
            filter.insert(entry);
        }
        Ok(filter)
    }
}

impl SnippetFilter for MockFilter {
    fn filter_id(&self) -> &str {
        &self.id
    }

    fn decision_threshold(&self) -> f64 {
        self.threshold
    }

    fn score_batch(&self, question: &str, snippets: &[&Snippet]) -> Result<Vec<f64>> {
        snippets
            .iter()
            .map(|s| {
                self.pairs
                    .get(&(question.to_string(), s.snippet_id.clone()))
                    .or_else(|| self.any_question.get(&s.snippet_id))
                    .copied()
                    .or(self.default_score)
                    .ok_or_else(|| Error::UnscriptedRequest {
                        route: "filter".into(),
                        key: s.snippet_id.clone(),
                    })
            })
            .collect()
    }
}

#[derive(Serialize)]
struct VerdictPair<'a> {
    question: &'a str,
    snippet: String,
    snippet_id: &'a str,
}

#[derive(Serialize)]
struct VerdictRequest<'a> {
    pairs: Vec<VerdictPair<'a>>,
}

#[derive(Deserialize)]
struct WireVerdict {
    snippet_id: String,
    score: f64,
    helpful: bool,
}

#[derive(Deserialize)]
struct VerdictResponse {
    verdicts: Vec<WireVerdict>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub filter_id: String,
}

/// Client for a filter model served over HTTP.
pub struct RemoteFilter {
    transport: HttpTransport,
    id: String,
    threshold: f64,
}

fn unavailable(e: Error) -> Error {
    match e {
        e @ Error::FilterUnavailable { .. } => e,
        other => Error::FilterUnavailable {
            message: other.to_string(),
            partial: Vec::new(),
        },
    }
}

impl RemoteFilter {
    pub fn new(endpoint: &str, threshold: f64, timeout: Duration, max_retries: u32) -> Self {
        let retry = RetryPolicy {
            max_retries,
            ..RetryPolicy::default()
        };
        Self {
            transport: HttpTransport::new(endpoint, None, timeout, retry),
            id: format!("remote:{}@{threshold}", endpoint.trim_end_matches('/')),
            threshold,
        }
    }

    /// Checks health and adopts the service's `filter_id`.
    pub fn connect(endpoint: &str, threshold: f64, timeout: Duration, max_retries: u32) -> Result<Self> {
        let mut filter = Self::new(endpoint, threshold, timeout, max_retries);
        let health = filter.health()?;
        if health.status != "ok" {
            return Err(Error::FilterUnavailable {
                message: format!("filter reports status {:?}", health.status),
                partial: Vec::new(),
            });
        }
        filter.id = format!("remote:{}@{threshold}", health.filter_id);
        Ok(filter)
    }

    pub fn health(&self) -> Result<Health> {
        let bytes = self.transport.get("/v1/health").map_err(unavailable)?;
        serde_json::from_slice(&bytes).map_err(|e| Error::protocol(format!("health response: {e}")))
    }
}

impl SnippetFilter for RemoteFilter {
    fn filter_id(&self) -> &str {
        &self.id
    }

    fn decision_threshold(&self) -> f64 {
        self.threshold
    }

    fn score_batch(&self, question: &str, snippets: &[&Snippet]) -> Result<Vec<f64>> {
        let body = VerdictRequest {
            pairs: snippets
                .iter()
                .map(|s| VerdictPair {
                    question,
                    snippet: s.retrieval_text(),
                    snippet_id: &s.snippet_id,
                })
                .collect(),
        };
        let bytes = self
            .transport
            .post("/v1/verdict", &serde_json::to_vec(&body)?)
            .map_err(unavailable)?;
        let response: VerdictResponse =
            serde_json::from_slice(&bytes).map_err(|e| Error::protocol(format!("verdict response: {e}")))?;
        if response.verdicts.len() != snippets.len() {
            return Err(Error::protocol(format!(
                "{} verdicts for {} pairs",
                response.verdicts.len(),
                snippets.len()
            )));
        }
        snippets
            .iter()
            .zip(response.verdicts)
            .map(|(s, v)| {
                if v.snippet_id != s.snippet_id {
                    return Err(Error::protocol(format!(
                        "verdict for {} where {} was expected",
                        v.snippet_id, s.snippet_id
                    )));
                }
                if v.helpful != (v.score >= self.threshold) {
                    warn!(
                        "service verdict for {} disagrees with local threshold {}",
                        v.snippet_id, self.threshold
                    );
                }
                Ok(v.score)
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterKind {
    Remote,
    Mock,
    #[default]
    PassThrough,
}

/// Which snippets the filter judges.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterScope {
    /// The `final_k` snippets left after the cut.
    #[default]
    Selected,
    /// The whole ranked pool; the first `final_k` helpful snippets are kept.
    Pool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterSpec {
    #[serde(default)]
    pub kind: FilterKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    /// Mock filter fixture (JSONL of [`MockEntry`]).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixture: Option<PathBuf>,
    #[serde(default = "default_threshold")]
    pub decision_threshold: f64,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default)]
    pub max_retries: u32,
    #[serde(default)]
    pub scope: FilterScope,
}

fn default_threshold() -> f64 {
    DEFAULT_DECISION_THRESHOLD
}
fn default_timeout() -> f64 {
    30.0
}

impl Default for FilterSpec {
    fn default() -> Self {
        Self {
            kind: FilterKind::PassThrough,
            endpoint: None,
            fixture: None,
            decision_threshold: DEFAULT_DECISION_THRESHOLD,
            timeout_secs: default_timeout(),
            max_retries: 0,
            scope: FilterScope::Selected,
        }
    }
}

impl FilterSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.decision_threshold) {
            return Err(Error::Config("decision_threshold must lie in [0, 1]".into()));
        }
        match self.kind {
            FilterKind::Remote if self.endpoint.is_none() => Err(Error::Config("remote filter needs an endpoint".into())),
            FilterKind::Mock if self.fixture.is_none() => Err(Error::Config("mock filter needs a fixture".into())),
            _ => Ok(()),
        }
    }
}

pub fn build_filter(spec: &FilterSpec) -> Result<Box<dyn SnippetFilter>> {
    spec.validate()?;
    Ok(match spec.kind {
        FilterKind::PassThrough => Box::new(PassThrough::default()),
        FilterKind::Mock => Box::new(MockFilter::from_jsonl(
            spec.fixture.as_deref().expect("validated"),
            spec.decision_threshold,
        )?),
        FilterKind::Remote => Box::new(RemoteFilter::connect(
            spec.endpoint.as_deref().expect("validated"),
            spec.decision_threshold,
            Duration::from_secs_f64(spec.timeout_secs),
            spec.max_retries,
        )?),
    })
}
