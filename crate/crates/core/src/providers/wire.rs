//! OpenAI-compatible request bodies and response parsing.
//!
//! Requests are plain JSON values so the same shape feeds the HTTP client,
//! the scripted fixtures and the cache key.

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use super::types::{EmbedRole, GenerationRequest, ScoredSequence, Vector};
use crate::digest::sha256_hex;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Route {
    Completions,
    ChatCompletions,
    Embeddings,
    Rerank,
}

impl Route {
    pub fn path(self) -> &'static str {
        match self {
            Route::Completions => "/v1/completions",
            Route::ChatCompletions => "/v1/chat/completions",
            Route::Embeddings => "/v1/embeddings",
            Route::Rerank => "/v1/rerank",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WireRequest {
    pub route: Route,
    pub body: Value,
}

impl WireRequest {
    pub fn new(route: Route, body: Value) -> Self {
        Self { route, body }
    }

    /// Canonical byte form: `{"body": <body>, "route": <path>}` with object
    /// keys sorted at every level and values verbatim.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let doc = json!({ "route": self.route.path(), "body": sorted(&self.body) });
        serde_json::to_vec(&sorted(&doc)).expect("json values always serialize")
    }

    pub fn cache_key(&self) -> String {
        cache_key(self)
    }

    /// Sampling requests with temperature > 0 are never served from cache.
    pub fn is_deterministic(&self) -> bool {
        match self.body.get("temperature").and_then(Value::as_f64) {
            Some(t) => t == 0.0,
            None => true,
        }
    }
}

/// SHA-256 of the canonical request, as 64 lowercase hex digits.
pub fn cache_key(req: &WireRequest) -> String {
    sha256_hex(req.canonical_bytes())
}

fn sorted(v: &Value) -> Value {
    match v {
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            let mut out = Map::new();
            for k in keys {
                out.insert(k.clone(), sorted(&map[k]));
            }
            Value::Object(out)
        }
        Value::Array(items) => Value::Array(items.iter().map(sorted).collect()),
        other => other.clone(),
    }
}

pub(crate) fn completion_request(model: &str, req: &GenerationRequest) -> WireRequest {
    let mut body = json!({
        "model": model,
        "prompt": req.prompt,
        "max_tokens": req.max_tokens,
        "temperature": req.temperature,
    });
    if let Some(stop) = &req.stop {
        body["stop"] = json!(stop);
    }
    WireRequest::new(Route::Completions, body)
}

pub(crate) fn chat_request(model: &str, req: &GenerationRequest) -> WireRequest {
    let mut body = json!({
        "model": model,
        "messages": [{ "role": "user", "content": req.prompt }],
        "max_tokens": req.max_tokens,
        "temperature": req.temperature,
    });
    if let Some(stop) = &req.stop {
        body["stop"] = json!(stop);
    }
    WireRequest::new(Route::ChatCompletions, body)
}

/// Echo scoring: the backend returns logprobs for the prompt itself and
/// generates nothing.
pub(crate) fn echo_request(model: &str, context: &str, target: &str) -> WireRequest {
    WireRequest::new(
        Route::Completions,
        json!({
            "model": model,
            "prompt": format!("{context}{target}"),
            "max_tokens": 0,
            "echo": true,
            "logprobs": 0,
            "temperature": 0.0,
        }),
    )
}

pub(crate) fn embedding_request(model: &str, texts: &[String], role: EmbedRole) -> WireRequest {
    WireRequest::new(
        Route::Embeddings,
        json!({ "model": model, "input": texts, "input_type": role.as_str() }),
    )
}

pub(crate) fn rerank_request(model: &str, query: &str, documents: &[String]) -> WireRequest {
    WireRequest::new(
        Route::Rerank,
        json!({ "model": model, "query": query, "documents": documents }),
    )
}

fn parse(bytes: &[u8]) -> Result<Value> {
    serde_json::from_slice(bytes).map_err(|e| Error::protocol(format!("response is not JSON: {e}")))
}

fn first_choice(v: &Value) -> Result<&Value> {
    v.get("choices")
        .and_then(Value::as_array)
        .and_then(|c| c.first())
        .ok_or_else(|| Error::protocol("response has no choices"))
}

/// Generated text from either a completions or a chat completions body.
pub(crate) fn parse_generation(bytes: &[u8]) -> Result<String> {
    let v = parse(bytes)?;
    let choice = first_choice(&v)?;
    if let Some(text) = choice.get("text").and_then(Value::as_str) {
        return Ok(text.to_string());
    }
    choice
        .pointer("/message/content")
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| Error::protocol("choice carries neither text nor message content"))
}

/// Splits echoed prompt logprobs into context and target at the character
/// offset where `target` begins.
pub(crate) fn parse_echo_logprobs(bytes: &[u8], context: &str, target: &str) -> Result<ScoredSequence> {
    let v = parse(bytes)?;
    let lp = first_choice(&v)?
        .get("logprobs")
        .filter(|l| !l.is_null())
        .ok_or_else(|| Error::Capability("prompt logprobs (response has no logprobs)".into()))?;
    let tokens: Vec<String> = lp
        .get("tokens")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::protocol("logprobs.tokens missing"))?
        .iter()
        .map(|t| t.as_str().map(str::to_string).ok_or_else(|| Error::protocol("non-string token")))
        .collect::<Result<_>>()?;
    let raw_lps = lp
        .get("token_logprobs")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::protocol("logprobs.token_logprobs missing"))?;
    if raw_lps.len() != tokens.len() {
        return Err(Error::protocol("tokens and token_logprobs differ in length"));
    }
    let offsets: Vec<usize> = match lp.get("text_offset").and_then(Value::as_array) {
        Some(offs) => offs
            .iter()
            .map(|o| o.as_u64().map(|o| o as usize).ok_or_else(|| Error::protocol("bad text_offset")))
            .collect::<Result<_>>()?,
        None => tokens
            .iter()
            .scan(0usize, |acc, t| {
                let start = *acc;
                *acc += t.chars().count();
                Some(start)
            })
            .collect(),
    };
    if offsets.len() != tokens.len() {
        return Err(Error::protocol("text_offset and tokens differ in length"));
    }

    let boundary = context.chars().count();
    let context_len = offsets.iter().take_while(|&&o| o < boundary).count();
    if context_len == tokens.len() || offsets[context_len] != boundary {
        return Err(Error::protocol(format!(
            "no token starts at the context/target boundary (char {boundary})"
        )));
    }
    let target_tokens = tokens[context_len..].to_vec();
    if target_tokens.concat() != target {
        return Err(Error::protocol("target tokens do not reassemble the target text"));
    }
    let logprobs = raw_lps[context_len..]
        .iter()
        .map(|lp| lp.as_f64().ok_or_else(|| Error::protocol("target token has no logprob")))
        .collect::<Result<Vec<f64>>>()?;
    ScoredSequence::new(target_tokens, logprobs, context_len)
}

pub(crate) fn parse_embeddings(bytes: &[u8], expected: usize) -> Result<Vec<Vector>> {
    let v = parse(bytes)?;
    let data = v
        .get("data")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::protocol("embeddings response has no data"))?;
    let mut slots: Vec<Option<Vector>> = vec![None; expected];
    for (pos, item) in data.iter().enumerate() {
        let index = item.get("index").and_then(Value::as_u64).map(|i| i as usize).unwrap_or(pos);
        let values: Vec<f32> = item
            .get("embedding")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::protocol("embedding entry without vector"))?
            .iter()
            .map(|x| x.as_f64().map(|x| x as f32).ok_or_else(|| Error::protocol("non-numeric embedding value")))
            .collect::<Result<_>>()?;
        let vector = Vector::new(values).map_err(|e| Error::protocol(e.to_string()))?;
        match slots.get_mut(index) {
            Some(slot @ None) => *slot = Some(vector),
            _ => return Err(Error::protocol(format!("embedding index {index} out of range or repeated"))),
        }
    }
    slots
        .into_iter()
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| Error::protocol("embeddings response is missing entries"))
}

pub(crate) fn parse_rerank(bytes: &[u8], expected: usize) -> Result<Vec<f64>> {
    let v = parse(bytes)?;
    let results = v
        .get("results")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::protocol("rerank response has no results"))?;
    let mut slots: Vec<Option<f64>> = vec![None; expected];
    for item in results {
        let index = item
            .get("index")
            .and_then(Value::as_u64)
            .ok_or_else(|| Error::protocol("rerank result without index"))? as usize;
        let score = item
            .get("relevance_score")
            .and_then(Value::as_f64)
            .ok_or_else(|| Error::protocol("rerank result without relevance_score"))?;
        match slots.get_mut(index) {
            Some(slot @ None) => *slot = Some(score),
            _ => return Err(Error::protocol(format!("rerank index {index} out of range or repeated"))),
        }
    }
    slots
        .into_iter()
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| Error::protocol("rerank response is missing entries"))
}
