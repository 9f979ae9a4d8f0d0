//! Multi-corpus candidate retrieval, reranking and final selection.
//!
//! `balanced` takes the same quota from every corpus, `stacked` takes a
//! global top-k over all corpora at once, and `independent` searches a single
//! designated corpus. Stacked and independent pools are sized
//! `k_per_corpus × number of corpora` so every strategy feeds the reranker the
//! same number of candidates.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Snippet;
use crate::error::{Error, Result};
use crate::providers::{embed_batch, rerank_scores, EmbedRole, Provider, Vector};
use crate::vindex::{fingerprint, rank_order, ScoreKind, ScoredSnippet, VectorIndex};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    Balanced,
    Stacked,
    Independent,
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "balanced" => Ok(Strategy::Balanced),
            "stacked" => Ok(Strategy::Stacked),
            "independent" => Ok(Strategy::Independent),
            other => Err(Error::invalid(format!("unknown retrieval strategy {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrievalConfig {
    #[serde(default)]
    pub strategy: Strategy,
    #[serde(default = "default_k_per_corpus")]
    pub k_per_corpus: usize,
    #[serde(default = "default_final_k")]
    pub final_k: usize,
    #[serde(default = "default_rerank")]
    pub rerank: bool,
    /// The corpus searched by the independent strategy.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus: Option<String>,
}

fn default_k_per_corpus() -> usize {
    8
}
fn default_final_k() -> usize {
    5
}
fn default_rerank() -> bool {
    true
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Balanced,
            k_per_corpus: default_k_per_corpus(),
            final_k: default_final_k(),
            rerank: default_rerank(),
            corpus: None,
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_per_corpus < 1 || self.final_k < 1 {
            return Err(Error::Config("k_per_corpus and final_k must be >= 1".into()));
        }
        if self.strategy == Strategy::Independent && self.corpus.is_none() {
            return Err(Error::Config("independent retrieval needs a designated corpus".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidatePool {
    pub candidates: Vec<ScoredSnippet>,
    /// Every searched corpus appears, with zero when it contributed nothing.
    pub per_corpus_counts: BTreeMap<String, usize>,
    /// The text that was embedded as the query.
    pub query_text: String,
}

impl CandidatePool {
    fn new(indices: &[VectorIndex], candidates: Vec<ScoredSnippet>, query_text: &str) -> Result<Self> {
        let mut per_corpus_counts: BTreeMap<String, usize> =
            indices.iter().map(|i| (i.corpus_id().to_string(), 0)).collect();
        let mut seen = HashSet::with_capacity(candidates.len());
        for c in &candidates {
            if !seen.insert(c.snippet_id.as_str()) {
                return Err(Error::invalid(format!("snippet {} retrieved twice", c.snippet_id)));
            }
            *per_corpus_counts.entry(c.corpus_id.clone()).or_default() += 1;
        }
        Ok(Self {
            candidates,
            per_corpus_counts,
            query_text: query_text.to_string(),
        })
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn ids(&self) -> Vec<String> {
        self.candidates.iter().map(|c| c.snippet_id.clone()).collect()
    }
}

fn per_corpus_top_k(indices: &[VectorIndex], query: &Vector, k: usize) -> Result<Vec<Vec<ScoredSnippet>>> {
    if indices.is_empty() {
        return Err(Error::invalid("retrieval needs at least one index"));
    }
    indices.par_iter().map(|idx| idx.top_k(query, k)).collect()
}

/// Top `k_per_corpus` from every corpus, interleaved round-robin by rank in
/// index order.
pub fn balanced_retrieve(
    indices: &[VectorIndex],
    query: &Vector,
    k_per_corpus: usize,
    query_text: &str,
) -> Result<CandidatePool> {
    let per_corpus = per_corpus_top_k(indices, query, k_per_corpus)?;
    let depth = per_corpus.iter().map(Vec::len).max().unwrap_or(0);
    let mut candidates = Vec::with_capacity(per_corpus.iter().map(Vec::len).sum());
    for rank in 0..depth {
        for hits in &per_corpus {
            if let Some(hit) = hits.get(rank) {
                candidates.push(hit.clone());
            }
        }
    }
    CandidatePool::new(indices, candidates, query_text)
}

/// Global top `k` by inner product over the union of all corpora.
pub fn stacked_retrieve(indices: &[VectorIndex], query: &Vector, k: usize, query_text: &str) -> Result<CandidatePool> {
    // The global top-k is contained in the union of per-corpus top-k lists.
    let mut merged: Vec<ScoredSnippet> = per_corpus_top_k(indices, query, k)?.into_iter().flatten().collect();
    merged.sort_by(rank_order);
    merged.truncate(k);
    CandidatePool::new(indices, merged, query_text)
}

pub fn independent_retrieve(
    indices: &[VectorIndex],
    corpus_id: &str,
    query: &Vector,
    k: usize,
    query_text: &str,
) -> Result<CandidatePool> {
    let index = indices
        .iter()
        .find(|i| i.corpus_id() == corpus_id)
        .ok_or_else(|| Error::invalid(format!("no index for corpus {corpus_id}")))?;
    let hits = index.top_k(query, k)?;
    CandidatePool::new(std::slice::from_ref(index), hits, query_text)
}

pub fn retrieve_pool(indices: &[VectorIndex], query: &Vector, cfg: &RetrievalConfig, query_text: &str) -> Result<CandidatePool> {
    cfg.validate()?;
    let total = cfg.k_per_corpus * indices.len().max(1);
    match cfg.strategy {
        Strategy::Balanced => balanced_retrieve(indices, query, cfg.k_per_corpus, query_text),
        Strategy::Stacked => stacked_retrieve(indices, query, total, query_text),
        Strategy::Independent => {
            let corpus = cfg.corpus.as_deref().expect("validated above");
            independent_retrieve(indices, corpus, query, total, query_text)
        }
    }
}

/// Snippet lookup by id.
#[derive(Clone, Debug, Default)]
pub struct SnippetStore {
    by_id: HashMap<String, Snippet>,
}

impl SnippetStore {
    pub fn new(snippets: impl IntoIterator<Item = Snippet>) -> Self {
        Self {
            by_id: snippets.into_iter().map(|s| (s.snippet_id.clone(), s)).collect(),
        }
    }

    pub fn get(&self, id: &str) -> Result<&Snippet> {
        self.by_id.get(id).ok_or_else(|| Error::UnknownSnippet(id.to_string()))
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }
}

/// Rescores the pool with a cross-encoder against the original question and
/// sorts by that score (descending, ties by ascending snippet id).
pub fn rerank_pool(
    pool: &CandidatePool,
    original_query: &str,
    reranker: &dyn Provider,
    store: &SnippetStore,
) -> Result<Vec<ScoredSnippet>> {
    if pool.is_empty() {
        return Err(Error::invalid("cannot rerank an empty pool"));
    }
    let texts = pool
        .candidates
        .iter()
        .map(|c| store.get(&c.snippet_id).map(Snippet::retrieval_text))
        .collect::<Result<Vec<_>>>()?;
    let scores = rerank_scores(reranker, original_query, &texts)?;
    let mut out: Vec<ScoredSnippet> = pool
        .candidates
        .iter()
        .zip(scores)
        .map(|(c, score)| ScoredSnippet {
            snippet_id: c.snippet_id.clone(),
            corpus_id: c.corpus_id.clone(),
            score,
            score_kind: ScoreKind::Rerank,
        })
        .collect();
    out.sort_by(rank_order);
    Ok(out)
}

/// Pool sorted by retrieval score, used when reranking is off.
pub fn sort_by_retrieval(pool: &CandidatePool) -> Vec<ScoredSnippet> {
    let mut out = pool.candidates.clone();
    out.sort_by(rank_order);
    out
}

pub fn select_final(ranked: &[ScoredSnippet], final_k: usize) -> Vec<ScoredSnippet> {
    ranked[..final_k.min(ranked.len())].to_vec()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Retrieval {
    pub pool: CandidatePool,
    /// The whole pool in final order (rerank or retrieval score).
    pub ranked: Vec<ScoredSnippet>,
    pub selected: Vec<ScoredSnippet>,
}

/// Indexes, snippets and the models needed to query them.
pub struct Retriever {
    indices: Vec<VectorIndex>,
    store: SnippetStore,
    embedder: Arc<dyn Provider>,
    reranker: Option<Arc<dyn Provider>>,
}

impl Retriever {
    pub fn new(
        indices: Vec<VectorIndex>,
        store: SnippetStore,
        embedder: Arc<dyn Provider>,
        reranker: Option<Arc<dyn Provider>>,
    ) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::invalid("retriever needs at least one index"));
        }
        let mut seen = HashSet::new();
        for idx in &indices {
            if !seen.insert(idx.corpus_id().to_string()) {
                return Err(Error::invalid(format!("two indexes for corpus {}", idx.corpus_id())));
            }
            let expected = fingerprint(embedder.model_name(), idx.dim());
            idx.check_fingerprint(&expected)?;
        }
        Ok(Self {
            indices,
            store,
            embedder,
            reranker,
        })
    }

    pub fn indices(&self) -> &[VectorIndex] {
        &self.indices
    }

    pub fn has_reranker(&self) -> bool {
        self.reranker.is_some()
    }

    pub fn embedder(&self) -> &Arc<dyn Provider> {
        &self.embedder
    }

    pub fn store(&self) -> &SnippetStore {
        &self.store
    }

    pub fn embed_query(&self, text: &str) -> Result<Vector> {
        let mut v = embed_batch(self.embedder.as_ref(), &[text.to_string()], EmbedRole::Query)?;
        Ok(v.remove(0))
    }

    /// Embeds `query_text`, builds the candidate pool, reranks against
    /// `original_query` when configured and selects the final snippets.
    pub fn retrieve(&self, query_text: &str, original_query: &str, cfg: &RetrievalConfig) -> Result<Retrieval> {
        let query = self.embed_query(query_text)?;
        let pool = retrieve_pool(&self.indices, &query, cfg, query_text)?;
        let ranked = if cfg.rerank && !pool.is_empty() {
            let reranker = self
                .reranker
                .as_deref()
                .ok_or_else(|| Error::Config("reranking enabled but no reranker configured".into()))?;
            rerank_pool(&pool, original_query, reranker, &self.store)?
        } else {
            sort_by_retrieval(&pool)
        };
        let selected = select_final(&ranked, cfg.final_k);
        Ok(Retrieval { pool, ranked, selected })
    }
}
