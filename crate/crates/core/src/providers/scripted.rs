//! Offline transport answering from a fixture table.
//!
//! Fixture files are JSONL, one `{"key": ..., "response": ...}` record per
//! line. A key of 64 hex digits is a canonical request digest (see
//! [`cache_key`](super::cache_key)) and matches exactly one request; any other
//! key is a literal looked up by request content:
//!
//! | `kind`               | literal key                    | response                          |
//! |----------------------|--------------------------------|-----------------------------------|
//! | `generate` (default) | the prompt / user message      | completion body, or a bare string |
//! | `logprobs`           | context + target (echo prompt) | completion body with `logprobs`   |
//! | `embedding`          | one input text                 | embeddings body with one entry    |
//! | `rerank`             | `query` U+001F `document`      | rerank body with one result       |
//!
//! Embedding and rerank requests are answered entry by entry, so batch
//! composition does not matter. Anything unmatched is an error.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::types::EmbedRole;
use super::wire::{Route, WireRequest};
use super::Transport;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FixtureKind {
    #[default]
    Generate,
    Logprobs,
    Embedding,
    Rerank,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FixtureRecord {
    pub key: String,
    pub response: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<FixtureKind>,
}

const RERANK_SEP: char = '\u{1f}';

#[derive(Debug, Default)]
pub struct ScriptedTransport {
    by_digest: HashMap<String, Value>,
    literal: HashMap<(FixtureKind, String), Value>,
    calls: AtomicUsize,
}

fn is_digest(key: &str) -> bool {
    key.len() == 64 && key.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b))
}

fn body_bytes(v: &Value) -> Vec<u8> {
    match v {
        Value::String(s) => s.clone().into_bytes(),
        other => serde_json::to_vec(other).expect("json values always serialize"),
    }
}

impl ScriptedTransport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_records(records: impl IntoIterator<Item = FixtureRecord>) -> Self {
        let mut s = Self::new();
        for r in records {
            s.insert(r);
        }
        s
    }

    pub fn from_jsonl(path: &Path) -> Result<Self> {
        let reader = BufReader::new(File::open(path)?);
        let mut s = Self::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record: FixtureRecord = serde_json::from_str(&line).map_err(|e| Error::Ingest {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
            s.insert(record);
        }
        Ok(s)
    }

    pub fn insert(&mut self, record: FixtureRecord) {
        if is_digest(&record.key) {
            self.by_digest.insert(record.key, record.response);
        } else {
            let kind = record.kind.unwrap_or_default();
            let response = match (kind, record.response) {
                (FixtureKind::Generate, Value::String(text)) => json!({"choices": [{"index": 0, "text": text}]}),
                (_, other) => other,
            };
            self.literal.insert((kind, record.key), response);
        }
    }

    pub fn generation(mut self, prompt: impl Into<String>, text: impl Into<String>) -> Self {
        self.insert(FixtureRecord {
            key: prompt.into(),
            response: Value::String(text.into()),
            kind: None,
        });
        self
    }

    /// Scripts echo logprobs: the whole context comes back as one unscored
    /// token followed by `tokens`, which must concatenate to the target.
    pub fn logprobs(mut self, context: &str, tokens: &[(&str, f64)]) -> Self {
        let target: String = tokens.iter().map(|(t, _)| *t).collect();
        let mut all_tokens = vec![context.to_string()];
        let mut all_lps = vec![Value::Null];
        let mut offsets = vec![0usize];
        let mut offset = context.chars().count();
        for (t, lp) in tokens {
            all_tokens.push(t.to_string());
            all_lps.push(json!(lp));
            offsets.push(offset);
            offset += t.chars().count();
        }
        let prompt = format!("{context}{target}");
        self.insert(FixtureRecord {
            key: prompt.clone(),
            response: json!({"choices": [{"index": 0, "text": prompt, "logprobs": {
                "tokens": all_tokens, "token_logprobs": all_lps, "text_offset": offsets
            }}]}),
            kind: Some(FixtureKind::Logprobs),
        });
        self
    }

    /// Embedding for `text` under both roles, unless a role-specific entry exists.
    pub fn embedding(mut self, text: impl Into<String>, values: Vec<f32>) -> Self {
        self.insert(FixtureRecord {
            key: text.into(),
            response: json!({"data": [{"index": 0, "embedding": values}]}),
            kind: Some(FixtureKind::Embedding),
        });
        self
    }

    pub fn embedding_for(mut self, role: EmbedRole, text: &str, values: Vec<f32>) -> Self {
        self.insert(FixtureRecord {
            key: format!("{}:{text}", role.as_str()),
            response: json!({"data": [{"index": 0, "embedding": values}]}),
            kind: Some(FixtureKind::Embedding),
        });
        self
    }

    pub fn rerank(mut self, query: &str, document: &str, score: f64) -> Self {
        self.insert(FixtureRecord {
            key: format!("{query}{RERANK_SEP}{document}"),
            response: json!({"results": [{"index": 0, "relevance_score": score}]}),
            kind: Some(FixtureKind::Rerank),
        });
        self
    }

    /// Exact response body for one specific request.
    pub fn response_for(mut self, req: &WireRequest, body: Value) -> Self {
        self.by_digest.insert(req.cache_key(), body);
        self
    }

    /// Number of requests answered or refused so far.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    fn lookup(&self, kind: FixtureKind, key: &str) -> Option<&Value> {
        self.literal.get(&(kind, key.to_string()))
    }

    fn miss(req: &WireRequest) -> Error {
        Error::UnscriptedRequest {
            route: req.route.path().to_string(),
            key: req.cache_key(),
        }
    }

    fn answer_literal(&self, req: &WireRequest) -> Option<Vec<u8>> {
        let body = &req.body;
        match req.route {
            Route::Completions => {
                let prompt = body.get("prompt")?.as_str()?;
                let echo = body.get("echo").and_then(Value::as_bool).unwrap_or(false);
                let kind = if echo { FixtureKind::Logprobs } else { FixtureKind::Generate };
                self.lookup(kind, prompt).map(body_bytes)
            }
            Route::ChatCompletions => {
                let prompt = body.get("messages")?.as_array()?.last()?.get("content")?.as_str()?;
                self.lookup(FixtureKind::Generate, prompt).map(body_bytes)
            }
            Route::Embeddings => {
                let role = body.get("input_type").and_then(Value::as_str).unwrap_or("");
                let mut data = Vec::new();
                for (i, text) in body.get("input")?.as_array()?.iter().enumerate() {
                    let text = text.as_str()?;
                    let entry = self
                        .lookup(FixtureKind::Embedding, &format!("{role}:{text}"))
                        .or_else(|| self.lookup(FixtureKind::Embedding, text))?;
                    let embedding = entry.pointer("/data/0/embedding")?.clone();
                    data.push(json!({"index": i, "embedding": embedding}));
                }
                Some(body_bytes(&json!({"object": "list", "data": data})))
            }
            Route::Rerank => {
                let query = body.get("query")?.as_str()?;
                let mut results = Vec::new();
                for (i, doc) in body.get("documents")?.as_array()?.iter().enumerate() {
                    let key = format!("{query}{RERANK_SEP}{}", doc.as_str()?);
                    let score = self.lookup(FixtureKind::Rerank, &key)?.pointer("/results/0/relevance_score")?.clone();
                    results.push(json!({"index": i, "relevance_score": score}));
                }
                Some(body_bytes(&json!({"results": results})))
            }
        }
    }
}

impl Transport for ScriptedTransport {
    fn send(&self, req: &WireRequest) -> Result<Vec<u8>> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        if let Some(v) = self.by_digest.get(&req.cache_key()) {
            return Ok(body_bytes(v));
        }
        self.answer_literal(req).ok_or_else(|| Self::miss(req))
    }
}
