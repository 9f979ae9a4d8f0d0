use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Mutex;

use serde_json::{json, Value};

use super::scripted::{FixtureKind, FixtureRecord};
use super::wire::{Route, WireRequest};
use super::Transport;
use crate::error::{Error, Result};

const RERANK_SEP: char = '\u{1f}';

/// Forwards requests and keeps every exchange as literal fixture records,
/// so a session can later be replayed by a scripted transport.
///
/// Embedding and rerank batches are split into per-entry records.
pub struct RecordingTransport<T> {
    inner: T,
    records: Mutex<BTreeMap<(FixtureKind, String), Value>>,
}

impl<T: Transport> RecordingTransport<T> {
    pub fn new(inner: T) -> Self {
        Self {
            inner,
            records: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn inner(&self) -> &T {
        &self.inner
    }

    /// Recorded entries in a stable order (kind, then key).
    pub fn records(&self) -> Vec<FixtureRecord> {
        let map = self.records.lock().unwrap_or_else(|e| e.into_inner());
        map.iter()
            .map(|((kind, key), response)| FixtureRecord {
                key: key.clone(),
                response: response.clone(),
                kind: Some(*kind),
            })
            .collect()
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        crate::io::write_jsonl(path, &self.records())
    }

    fn keep(&self, entries: Vec<((FixtureKind, String), Value)>) {
        let mut map = self.records.lock().unwrap_or_else(|e| e.into_inner());
        for (k, v) in entries {
            map.insert(k, v);
        }
    }
}

fn unrecordable(what: &str) -> Error {
    Error::protocol(format!("cannot record {what}"))
}

fn split(req: &WireRequest, response: &Value) -> Result<Vec<((FixtureKind, String), Value)>> {
    let body = &req.body;
    let text = |v: Option<&Value>, what: &str| v.and_then(Value::as_str).map(str::to_string).ok_or_else(|| unrecordable(what));
    Ok(match req.route {
        Route::Completions => {
            let prompt = text(body.get("prompt"), "completion prompt")?;
            let kind = if body.get("echo").and_then(Value::as_bool).unwrap_or(false) {
                FixtureKind::Logprobs
            } else {
                FixtureKind::Generate
            };
            vec![((kind, prompt), response.clone())]
        }
        Route::ChatCompletions => {
            let prompt = text(body.pointer("/messages").and_then(|m| m.as_array()?.last()?.get("content")), "chat message")?;
            vec![((FixtureKind::Generate, prompt), response.clone())]
        }
        Route::Embeddings => {
            let role = body.get("input_type").and_then(Value::as_str).unwrap_or("");
            let inputs = body.get("input").and_then(Value::as_array).ok_or_else(|| unrecordable("embedding input"))?;
            let data = response.get("data").and_then(Value::as_array).ok_or_else(|| unrecordable("embedding data"))?;
            let mut out = Vec::with_capacity(inputs.len());
            for (pos, entry) in data.iter().enumerate() {
                let index = entry.get("index").and_then(Value::as_u64).map_or(pos, |i| i as usize);
                let input = text(inputs.get(index), "embedding input")?;
                let embedding = entry.get("embedding").cloned().ok_or_else(|| unrecordable("embedding"))?;
                out.push((
                    (FixtureKind::Embedding, format!("{role}:{input}")),
                    json!({"data": [{"index": 0, "embedding": embedding}]}),
                ));
            }
            out
        }
        Route::Rerank => {
            let query = text(body.get("query"), "rerank query")?;
            let docs = body.get("documents").and_then(Value::as_array).ok_or_else(|| unrecordable("rerank documents"))?;
            let results = response.get("results").and_then(Value::as_array).ok_or_else(|| unrecordable("rerank results"))?;
            let mut out = Vec::with_capacity(docs.len());
            for r in results {
                let index = r.get("index").and_then(Value::as_u64).ok_or_else(|| unrecordable("rerank index"))? as usize;
                let doc = text(docs.get(index), "rerank document")?;
                let score = r.get("relevance_score").cloned().ok_or_else(|| unrecordable("rerank score"))?;
                out.push((
                    (FixtureKind::Rerank, format!("{query}{RERANK_SEP}{doc}")),
                    json!({"results": [{"index": 0, "relevance_score": score}]}),
                ));
            }
            out
        }
    })
}

impl<T: Transport> Transport for RecordingTransport<T> {
    fn send(&self, req: &WireRequest) -> Result<Vec<u8>> {
        let bytes = self.inner.send(req)?;
        let response: Value = serde_json::from_slice(&bytes).map_err(|e| unrecordable(&format!("non-JSON response: {e}")))?;
        self.keep(split(req, &response)?);
        Ok(bytes)
    }
}
