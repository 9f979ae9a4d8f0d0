//! Model access: generation, prompt logprob scoring, embeddings and rerank
//! scores behind one [`Provider`] trait.
//!
//! Backends speak an OpenAI-compatible wire protocol through a [`Transport`].
//! [`HttpTransport`] talks to a real server, [`ScriptedTransport`] answers from
//! a fixture table, and [`CachedTransport`] wraps either with a content-addressed
//! disk cache. The free functions in this module ([`generate`],
//! [`score_logprobs`], [`embed_batch`], [`rerank_scores`]) are what the rest of
//! the crate calls: they check preconditions and output alignment so that
//! backend quirks surface as errors instead of silently wrong data.

mod cache;
mod config;
mod http;
mod openai;
mod recording;
mod scripted;
mod types;
mod wire;

pub use cache::{cache_dir_digest, CacheMode, CachedTransport};
pub use config::{build_provider, ApiStyle, ProviderConfig, ProviderKind, DEFAULT_API_KEY_ENV};
pub use http::{global_limiter, ConcurrencyLimit, HttpTransport, RetryPolicy};
pub use openai::OpenAiProvider;
pub use recording::RecordingTransport;
pub use scripted::{FixtureKind, FixtureRecord, ScriptedTransport};
pub(crate) use types::dot;
pub use types::{EmbedRole, GenerationRequest, ScoredSequence, Vector};
pub use wire::{cache_key, Route, WireRequest};

use std::sync::Arc;

use crate::error::{Error, Result};

/// Delivers one wire request and returns the raw 2xx response body.
pub trait Transport: Send + Sync {
    fn send(&self, req: &WireRequest) -> Result<Vec<u8>>;
}

impl<T: Transport + ?Sized> Transport for Arc<T> {
    fn send(&self, req: &WireRequest) -> Result<Vec<u8>> {
        (**self).send(req)
    }
}

impl<T: Transport + ?Sized> Transport for &T {
    fn send(&self, req: &WireRequest) -> Result<Vec<u8>> {
        (**self).send(req)
    }
}

impl<T: Transport + ?Sized> Transport for Box<T> {
    fn send(&self, req: &WireRequest) -> Result<Vec<u8>> {
        (**self).send(req)
    }
}

/// A model backend.
///
/// Every capability has a default that reports [`Error::Capability`], so an
/// embedding-only or rerank-only backend implements just what it has.
pub trait Provider: Send + Sync {
    /// Model identity, used in index fingerprints and provenance.
    fn model_name(&self) -> &str;

    fn complete(&self, _req: &GenerationRequest) -> Result<String> {
        Err(Error::Capability("text generation".into()))
    }

    /// Logprobs of `target` tokens conditioned on `context`.
    fn prompt_logprobs(&self, _context: &str, _target: &str) -> Result<ScoredSequence> {
        Err(Error::Capability("prompt logprobs".into()))
    }

    fn embed(&self, _texts: &[String], _role: EmbedRole) -> Result<Vec<Vector>> {
        Err(Error::Capability("embeddings".into()))
    }

    /// Largest number of texts accepted by one [`Provider::embed`] call.
    fn max_embed_batch(&self) -> usize {
        usize::MAX
    }

    fn cross_scores(&self, _query: &str, _candidates: &[String]) -> Result<Vec<f64>> {
        Err(Error::Capability("rerank scores".into()))
    }
}

pub fn generate(provider: &dyn Provider, req: &GenerationRequest) -> Result<String> {
    req.validate()?;
    provider.complete(req)
}

pub fn score_logprobs(provider: &dyn Provider, context: &str, target: &str) -> Result<ScoredSequence> {
    if target.is_empty() {
        return Err(Error::invalid("score_logprobs target must be non-empty"));
    }
    let seq = provider.prompt_logprobs(context, target)?;
    seq.check()?;
    if seq.is_empty() {
        return Err(Error::protocol("backend returned no target tokens"));
    }
    Ok(seq)
}

/// Embeds `texts` with the encoder selected by `role`, splitting into
/// sub-batches no larger than the provider's cap. Output order matches input.
pub fn embed_batch(provider: &dyn Provider, texts: &[String], role: EmbedRole) -> Result<Vec<Vector>> {
    if texts.is_empty() {
        return Err(Error::invalid("embed_batch needs at least one text"));
    }
    if let Some(i) = texts.iter().position(|t| t.trim().is_empty()) {
        return Err(Error::invalid(format!("embed_batch text {i} is empty")));
    }
    let cap = provider.max_embed_batch().max(1);
    let mut out = Vec::with_capacity(texts.len());
    for chunk in texts.chunks(cap) {
        let vecs = provider.embed(chunk, role)?;
        if vecs.len() != chunk.len() {
            return Err(Error::protocol(format!(
                "embedding backend returned {} vectors for {} texts",
                vecs.len(),
                chunk.len()
            )));
        }
        out.extend(vecs);
    }
    let dim = out[0].dim();
    if let Some(bad) = out.iter().find(|v| v.dim() != dim) {
        return Err(Error::protocol(format!(
            "embedding dimension drift within batch: {dim} vs {}",
            bad.dim()
        )));
    }
    Ok(out)
}

/// One cross-encoder relevance score per candidate, aligned with input order.
pub fn rerank_scores(provider: &dyn Provider, query: &str, candidates: &[String]) -> Result<Vec<f64>> {
    if candidates.is_empty() {
        return Err(Error::invalid("rerank_scores needs at least one candidate"));
    }
    let scores = provider.cross_scores(query, candidates)?;
    if scores.len() != candidates.len() {
        return Err(Error::protocol(format!(
            "reranker returned {} scores for {} candidates",
            scores.len(),
            candidates.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::protocol("reranker returned a non-finite score"));
    }
    Ok(scores)
}
