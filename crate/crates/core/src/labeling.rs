//! Filter-training labels from answer flips and perplexity differentials.
//!
//! For every (question, snippet) pair the closed-book rationale is scored
//! twice as a fixed target: once after the closed-book prompt and once after
//! the snippet-augmented prompt. `delta = ppl_without - ppl_with`, so a
//! positive delta means the snippet made the model more confident in its own
//! reasoning. Labels follow a fixed precedence:
//!
//! | correct without | correct with | delta      | label       | rule        |
//! |-----------------|--------------|------------|-------------|-------------|
//! | no              | yes          | any        | helpful     | flip_up     |
//! | yes             | no           | any        | not_helpful | flip_down   |
//! | same            | same         | `>= tau`   | helpful     | delta_above |
//! | same            | same         | `< tau`    | not_helpful | delta_below |
//!
//! `tau` is calibrated after all pairs are scored so that the top
//! `percentile` of deltas clear it.

use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Snippet;
use crate::digest::{sha256_hex, DigestBuilder};
use crate::error::{Error, Result};
use crate::providers::{score_logprobs, Provider, ScoredSequence};
use crate::rationale::{build_cot_prompt, generate_rationale, rationale_query, McqaItem, PromptTemplate, QueryOptions};
use crate::retrieval::{RetrievalConfig, Retriever, Strategy};

pub const DEFAULT_PERCENTILE: f64 = 0.25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerplexityResult {
    pub ppl: f64,
    pub token_count: usize,
    pub sum_logprob: f64,
    pub context_digest: String,
}

impl PerplexityResult {
    /// `exp(-sum / L)` over the target logprobs.
    pub fn from_scored(seq: &ScoredSequence, context: &str) -> Result<Self> {
        if seq.is_empty() {
            return Err(Error::invalid("perplexity of an empty sequence"));
        }
        let sum_logprob = seq.sum_logprob();
        let token_count = seq.len();
        Ok(Self {
            ppl: (-sum_logprob / token_count as f64).exp(),
            token_count,
            sum_logprob,
            context_digest: sha256_hex(context),
        })
    }
}

/// Perplexity of `rationale_text` under the closed-book prompt, or under the
/// prompt augmented with `snippet`.
pub fn score_rationale_ppl(
    provider: &dyn Provider,
    template: &PromptTemplate,
    item: &McqaItem,
    rationale_text: &str,
    snippet: Option<&Snippet>,
) -> Result<PerplexityResult> {
    if rationale_text.is_empty() {
        return Err(Error::invalid("cannot score an empty rationale"));
    }
    let context = build_cot_prompt(template, item, snippet.map(std::slice::from_ref).unwrap_or_default());
    let seq = score_logprobs(provider, &context, rationale_text)?;
    PerplexityResult::from_scored(&seq, &context)
}

pub fn delta_ppl(without: &PerplexityResult, with: &PerplexityResult) -> Result<f64> {
    if without.token_count != with.token_count {
        return Err(Error::Alignment {
            without: without.token_count,
            with: with.token_count,
        });
    }
    Ok(without.ppl - with.ppl)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdCalibration {
    pub tau: f64,
    pub percentile: f64,
    pub sample_size: usize,
    /// Calibration deltas exactly equal to `tau` (always >= 1). All of them pass.
    pub ties: usize,
    /// Deltas with `delta >= tau`.
    pub passing: usize,
    pub delta_distribution_digest: String,
}

/// `tau` is the `ceil(n * percentile)`-th largest delta.
pub fn calibrate_tau(deltas: &[f64], percentile: f64) -> Result<ThresholdCalibration> {
    if deltas.is_empty() {
        return Err(Error::Calibration("no deltas to calibrate on".into()));
    }
    if !(percentile > 0.0 && percentile < 1.0) {
        return Err(Error::Calibration(format!("percentile {percentile} outside (0, 1)")));
    }
    if deltas.iter().any(|d| !d.is_finite()) {
        return Err(Error::Calibration("non-finite delta".into()));
    }
    let n = deltas.len();
    let mut sorted = deltas.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let quota = ((n as f64 * percentile - 1e-9).ceil() as usize).clamp(1, n);
    let tau = sorted[quota - 1];
    let ties = sorted.iter().filter(|&&d| d == tau).count();
    let passing = sorted.iter().filter(|&&d| d >= tau).count();
    let digest = sorted
        .iter()
        .fold(DigestBuilder::new(), |b, d| b.part(d.to_bits().to_le_bytes()))
        .finish();
    Ok(ThresholdCalibration {
        tau,
        percentile,
        sample_size: n,
        ties,
        passing,
        delta_distribution_digest: digest,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Helpfulness {
    Helpful,
    NotHelpful,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelRule {
    FlipUp,
    FlipDown,
    DeltaAbove,
    DeltaBelow,
}

pub fn label_pair(correct_without: bool, correct_with: bool, delta: f64, tau: f64) -> (Helpfulness, LabelRule) {
    match (correct_without, correct_with) {
        (false, true) => (Helpfulness::Helpful, LabelRule::FlipUp),
        (true, false) => (Helpfulness::NotHelpful, LabelRule::FlipDown),
        _ if delta >= tau => (Helpfulness::Helpful, LabelRule::DeltaAbove),
        _ => (Helpfulness::NotHelpful, LabelRule::DeltaBelow),
    }
}

/// A scored pair before `tau` is known.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredPair {
    pub item_id: String,
    pub snippet_id: String,
    pub question: String,
    pub snippet_text: String,
    pub rationale_digest: String,
    pub correct_without: bool,
    pub correct_with: bool,
    pub ppl_without: PerplexityResult,
    pub ppl_with: PerplexityResult,
    pub delta_ppl: f64,
}

impl ScoredPair {
    pub fn accuracy_unchanged(&self) -> bool {
        self.correct_without == self.correct_with
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub item_id: String,
    pub snippet_id: String,
    pub question: String,
    pub snippet_text: String,
    pub rationale_digest: String,
    pub correct_without: bool,
    pub correct_with: bool,
    pub ppl_without: PerplexityResult,
    pub ppl_with: PerplexityResult,
    pub delta_ppl: f64,
    /// Absent only when no pair needed the threshold.
    pub tau: Option<f64>,
    pub label: Helpfulness,
    pub rule_fired: LabelRule,
}

impl LabelRecord {
    /// Label re-derived from the stored raw fields.
    pub fn rederive(&self) -> (Helpfulness, LabelRule) {
        label_pair(
            self.correct_without,
            self.correct_with,
            self.delta_ppl,
            self.tau.unwrap_or(f64::INFINITY),
        )
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationPopulation {
    /// Deltas of pairs whose answer correctness did not change.
    #[default]
    UnchangedAccuracy,
    All,
}

/// Calibrates `tau` over the chosen population and labels every pair.
/// Output is sorted by (item_id, snippet_id).
pub fn finalize_labels(
    pairs: Vec<ScoredPair>,
    percentile: f64,
    population: CalibrationPopulation,
) -> Result<(Vec<LabelRecord>, Option<ThresholdCalibration>)> {
    let deltas: Vec<f64> = pairs
        .iter()
        .filter(|p| population == CalibrationPopulation::All || p.accuracy_unchanged())
        .map(|p| p.delta_ppl)
        .collect();
    let calibration = if deltas.is_empty() {
        None
    } else {
        Some(calibrate_tau(&deltas, percentile)?)
    };
    let tau = calibration.as_ref().map(|c| c.tau);
    let mut records: Vec<LabelRecord> = pairs
        .into_iter()
        .map(|p| {
            let (label, rule_fired) =
                label_pair(p.correct_without, p.correct_with, p.delta_ppl, tau.unwrap_or(f64::INFINITY));
            LabelRecord {
                item_id: p.item_id,
                snippet_id: p.snippet_id,
                question: p.question,
                snippet_text: p.snippet_text,
                rationale_digest: p.rationale_digest,
                correct_without: p.correct_without,
                correct_with: p.correct_with,
                ppl_without: p.ppl_without,
                ppl_with: p.ppl_with,
                delta_ppl: p.delta_ppl,
                tau,
                label,
                rule_fired,
            }
        })
        .collect();
    records.sort_by(|a, b| (&a.item_id, &a.snippet_id).cmp(&(&b.item_id, &b.snippet_id)));
    Ok((records, calibration))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelingConfig {
    #[serde(default = "labeling_retrieval")]
    pub retrieval: RetrievalConfig,
    #[serde(default = "default_percentile")]
    pub percentile: f64,
    #[serde(default)]
    pub population: CalibrationPopulation,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default)]
    pub query: QueryOptions,
}

fn labeling_retrieval() -> RetrievalConfig {
    RetrievalConfig {
        strategy: Strategy::Balanced,
        k_per_corpus: 8,
        final_k: 8,
        rerank: true,
        corpus: None,
    }
}
fn default_percentile() -> f64 {
    DEFAULT_PERCENTILE
}
fn default_max_tokens() -> u32 {
    512
}

impl Default for LabelingConfig {
    fn default() -> Self {
        Self {
            retrieval: labeling_retrieval(),
            percentile: DEFAULT_PERCENTILE,
            population: CalibrationPopulation::default(),
            max_tokens: default_max_tokens(),
            query: QueryOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedItem {
    pub item_id: String,
    pub stage: String,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelDataset {
    pub records: Vec<LabelRecord>,
    pub calibration: Option<ThresholdCalibration>,
    pub population: CalibrationPopulation,
    pub skipped: Vec<SkippedItem>,
}

fn stage<T>(item: &McqaItem, name: &str, r: Result<T>) -> std::result::Result<T, SkippedItem> {
    r.map_err(|e| SkippedItem {
        item_id: item.item_id.clone(),
        stage: name.to_string(),
        error: e.to_string(),
    })
}

fn label_item(
    item: &McqaItem,
    llm: &dyn Provider,
    retriever: &Retriever,
    template: &PromptTemplate,
    cfg: &LabelingConfig,
) -> std::result::Result<Vec<ScoredPair>, SkippedItem> {
    stage(item, "validate", item.validate())?;
    let closed = stage(item, "closed_book", generate_rationale(llm, template, item, &[], cfg.max_tokens))?;
    let correct_without = closed.extracted_option == Some(item.gold);
    let query = stage(item, "query", rationale_query(&closed, &item.question, cfg.query))?;
    if let Some(w) = &query.warning {
        warn!("{w}");
    }
    let retrieval = stage(item, "retrieval", retriever.retrieve(&query.text, &item.question, &cfg.retrieval))?;
    let ppl_without = stage(
        item,
        "score_without",
        score_rationale_ppl(llm, template, item, &closed.rationale_text, None),
    )?;
    let rationale_digest = sha256_hex(&closed.rationale_text);

    let mut pairs = Vec::with_capacity(retrieval.selected.len());
    for hit in &retrieval.selected {
        let snippet = stage(item, "retrieval", retriever.store().get(&hit.snippet_id).cloned())?;
        let with = stage(
            item,
            "answer_with",
            generate_rationale(llm, template, item, std::slice::from_ref(&snippet), cfg.max_tokens),
        )?;
        let ppl_with = stage(
            item,
            "score_with",
            score_rationale_ppl(llm, template, item, &closed.rationale_text, Some(&snippet)),
        )?;
        let delta = stage(item, "delta", delta_ppl(&ppl_without, &ppl_with))?;
        pairs.push(ScoredPair {
            item_id: item.item_id.clone(),
            snippet_id: snippet.snippet_id.clone(),
            question: item.question.clone(),
            snippet_text: snippet.retrieval_text(),
            rationale_digest: rationale_digest.clone(),
            correct_without,
            correct_with: with.extracted_option == Some(item.gold),
            ppl_without: ppl_without.clone(),
            ppl_with,
            delta_ppl: delta,
        });
    }
    Ok(pairs)
}

/// Labels every retrieved snippet of every item. Items whose model calls fail
/// are listed in `skipped` rather than aborting the run.
pub fn build_label_dataset(
    items: &[McqaItem],
    llm: &dyn Provider,
    retriever: &Retriever,
    template: &PromptTemplate,
    cfg: &LabelingConfig,
) -> Result<LabelDataset> {
    cfg.retrieval.validate()?;
    let outcomes: Vec<_> = items
        .par_iter()
        .map(|item| label_item(item, llm, retriever, template, cfg))
        .collect();
    let mut pairs = Vec::new();
    let mut skipped = Vec::new();
    for outcome in outcomes {
        match outcome {
            Ok(p) => pairs.extend(p),
            Err(s) => skipped.push(s),
        }
    }
    skipped.sort_by(|a, b| a.item_id.cmp(&b.item_id));
    let (records, calibration) = finalize_labels(pairs, cfg.percentile, cfg.population)?;
    Ok(LabelDataset {
        records,
        calibration,
        population: cfg.population,
        skipped,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSidecar {
    pub tau: Option<f64>,
    pub percentile: f64,
    pub n: usize,
    pub ties: usize,
    pub population: CalibrationPopulation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_distribution_digest: Option<String>,
}

pub fn sidecar_path(labels: &Path, suffix: &str) -> PathBuf {
    let mut name = labels.file_name().unwrap_or_default().to_os_string();
    name.push(suffix);
    labels.with_file_name(name)
}

/// Writes `labels.jsonl`, `labels.jsonl.calibration.json` and
/// `labels.jsonl.skipped.jsonl`.
pub fn export_labels(dataset: &LabelDataset, percentile: f64, path: &Path) -> Result<()> {
    crate::io::write_jsonl(path, &dataset.records)?;

    let c = dataset.calibration.as_ref();
    let sidecar = CalibrationSidecar {
        tau: c.map(|c| c.tau),
        percentile,
        n: c.map_or(0, |c| c.sample_size),
        ties: c.map_or(0, |c| c.ties),
        population: dataset.population,
        delta_distribution_digest: c.map(|c| c.delta_distribution_digest.clone()),
    };
    let mut bytes = serde_json::to_vec_pretty(&sidecar)?;
    bytes.push(b'\n');
    fs::write(sidecar_path(path, ".calibration.json"), bytes)?;

    crate::io::write_jsonl(&sidecar_path(path, ".skipped.jsonl"), &dataset.skipped)
}

pub fn read_labels(path: &Path) -> Result<Vec<LabelRecord>> {
    crate::io::read_jsonl(path)
}
