use super::config::ApiStyle;
use super::types::{EmbedRole, GenerationRequest, ScoredSequence, Vector};
use super::wire::{self, WireRequest};
use super::{Provider, Transport};
use crate::error::Result;

/// [`Provider`] speaking the OpenAI-compatible protocol over any [`Transport`].
///
/// Logprob scoring always uses the completions route with `echo`, whatever
/// `api` says, because chat endpoints do not return prompt logprobs.
pub struct OpenAiProvider<T> {
    transport: T,
    model: String,
    api: ApiStyle,
    max_batch: usize,
}

impl<T: Transport> OpenAiProvider<T> {
    pub fn new(transport: T, model: impl Into<String>) -> Self {
        Self {
            transport,
            model: model.into(),
            api: ApiStyle::Completions,
            max_batch: 256,
        }
    }

    pub fn with_api(mut self, api: ApiStyle) -> Self {
        self.api = api;
        self
    }

    pub fn with_max_batch(mut self, max_batch: usize) -> Self {
        self.max_batch = max_batch.max(1);
        self
    }

    pub fn transport(&self) -> &T {
        &self.transport
    }

    fn send(&self, req: &WireRequest) -> Result<Vec<u8>> {
        self.transport.send(req)
    }
}

impl<T: Transport> Provider for OpenAiProvider<T> {
    fn model_name(&self) -> &str {
        &self.model
    }

    fn complete(&self, req: &GenerationRequest) -> Result<String> {
        let wire = match self.api {
            ApiStyle::Completions => wire::completion_request(&self.model, req),
            ApiStyle::Chat => wire::chat_request(&self.model, req),
        };
        wire::parse_generation(&self.send(&wire)?)
    }

    fn prompt_logprobs(&self, context: &str, target: &str) -> Result<ScoredSequence> {
        let bytes = self.send(&wire::echo_request(&self.model, context, target))?;
        wire::parse_echo_logprobs(&bytes, context, target)
    }

    fn embed(&self, texts: &[String], role: EmbedRole) -> Result<Vec<Vector>> {
        let bytes = self.send(&wire::embedding_request(&self.model, texts, role))?;
        wire::parse_embeddings(&bytes, texts.len())
    }

    fn max_embed_batch(&self) -> usize {
        self.max_batch
    }

    fn cross_scores(&self, query: &str, candidates: &[String]) -> Result<Vec<f64>> {
        let bytes = self.send(&wire::rerank_request(&self.model, query, candidates))?;
        wire::parse_rerank(&bytes, candidates.len())
    }
}
