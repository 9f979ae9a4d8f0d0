use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use proptest::prelude::*;
use rag2::corpus::Snippet;
use rag2::providers::{
    cache_key, embed_batch, generate, CacheMode, CachedTransport, EmbedRole, GenerationRequest, OpenAiProvider,
    Provider, Route, ScriptedTransport, Transport, Vector, WireRequest,
};
use rag2::retrieval::{rerank_pool, CandidatePool, SnippetStore};
use rag2::vindex::{ScoreKind, ScoredSnippet};
use rag2::{Error, Result};
use serde_json::json;

/// Embeds text `"t{i}"` as `[i, 1]` and logs every batch size.
#[derive(Default)]
struct IndexEmbedder {
    batches: Mutex<Vec<usize>>,
}

impl Provider for IndexEmbedder {
    fn model_name(&self) -> &str {
        "index"
    }

    fn embed(&self, texts: &[String], _role: EmbedRole) -> Result<Vec<Vector>> {
        self.batches.lock().unwrap().push(texts.len());
        texts
            .iter()
            .map(|t| Vector::new(vec![t[1..].parse::<f32>().unwrap(), 1.0]))
            .collect()
    }

    fn max_embed_batch(&self) -> usize {
        256
    }
}

#[test]
fn embed_batch_splits_and_preserves_order() {
    let p = IndexEmbedder::default();
    let texts: Vec<String> = (0..1000).map(|i| format!("t{i}")).collect();
    let out = embed_batch(&p, &texts, EmbedRole::Document).unwrap();
    assert_eq!(out.len(), 1000);
    for (i, v) in out.iter().enumerate() {
        assert_eq!(v.values()[0], i as f32);
    }
    let batches = p.batches.lock().unwrap().clone();
    assert!(batches.len() >= 4);
    assert!(batches.iter().all(|&b| b <= 256));
    assert_eq!(batches.iter().sum::<usize>(), 1000);
}

#[test]
fn embed_batch_rejects_blank_text_and_dimension_drift() {
    let p = IndexEmbedder::default();
    let err = embed_batch(&p, &["t1".into(), "  ".into()], EmbedRole::Query).unwrap_err();
    assert!(matches!(err, Error::InvalidInput(_)));

    let scripted = ScriptedTransport::new()
        .embedding_for(EmbedRole::Query, "a", vec![1.0, 0.0])
        .embedding_for(EmbedRole::Query, "b", vec![1.0, 0.0, 0.0]);
    let p = OpenAiProvider::new(scripted, "m").with_max_batch(1);
    let err = embed_batch(&p, &["a".into(), "b".into()], EmbedRole::Query).unwrap_err();
    assert!(matches!(err, Error::Protocol(_)), "{err:?}");
}

/// Scores a candidate by a hash of (query, text), independent of position.
struct HashReranker;

impl Provider for HashReranker {
    fn model_name(&self) -> &str {
        "hash-rerank"
    }

    fn cross_scores(&self, query: &str, candidates: &[String]) -> Result<Vec<f64>> {
        Ok(candidates
            .iter()
            .map(|c| {
                let h = c.bytes().chain(query.bytes()).fold(17u64, |h, b| h.wrapping_mul(31).wrapping_add(b as u64));
                // Coarse buckets so ties occur.
                (h % 7) as f64
            })
            .collect())
    }
}

fn snippet(i: usize) -> Snippet {
    Snippet {
        snippet_id: format!("c/d{i:03}#0"),
        corpus_id: "c".into(),
        doc_id: format!("d{i:03}"),
        seq: 0,
        title: None,
        text: format!("snippet number {i}"),
        span: (0, 1),
    }
}

proptest! {
    #[test]
    fn rerank_is_invariant_to_pool_order(n in 1usize..40, seed in any::<u64>()) {
        let snippets: Vec<Snippet> = (0..n).map(snippet).collect();
        let store = SnippetStore::new(snippets.clone());
        let candidates: Vec<ScoredSnippet> = snippets
            .iter()
            .map(|s| ScoredSnippet {
                snippet_id: s.snippet_id.clone(),
                corpus_id: "c".into(),
                score: 0.0,
                score_kind: ScoreKind::Retrieval,
            })
            .collect();
        let mut shuffled = candidates.clone();
        let mut state = seed;
        for i in (1..shuffled.len()).rev() {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            shuffled.swap(i, (state >> 33) as usize % (i + 1));
        }
        let pool = |c: Vec<ScoredSnippet>| CandidatePool {
            candidates: c,
            per_corpus_counts: BTreeMap::from([("c".to_string(), n)]),
            query_text: "q".into(),
        };
        let a = rerank_pool(&pool(candidates), "question", &HashReranker, &store).unwrap();
        let b = rerank_pool(&pool(shuffled), "question", &HashReranker, &store).unwrap();
        prop_assert_eq!(&a, &b);
        for w in a.windows(2) {
            prop_assert!(w[0].score > w[1].score || (w[0].score == w[1].score && w[0].snippet_id < w[1].snippet_id));
        }
        prop_assert!(a.iter().all(|s| s.score_kind == ScoreKind::Rerank));
    }

    #[test]
    fn cache_key_ignores_object_key_order(a in "[a-z]{0,12}", b in 0u32..100, t in 0u32..3) {
        let one = WireRequest::new(Route::Completions, json!({"model": a, "max_tokens": b, "temperature": t}));
        let mut reordered = serde_json::Map::new();
        reordered.insert("temperature".into(), json!(t));
        reordered.insert("max_tokens".into(), json!(b));
        reordered.insert("model".into(), json!(a));
        let two = WireRequest::new(Route::Completions, serde_json::Value::Object(reordered));
        prop_assert_eq!(cache_key(&one), cache_key(&two));
        let other_route = WireRequest::new(Route::ChatCompletions, one.body.clone());
        prop_assert_ne!(cache_key(&one), cache_key(&other_route));
    }
}

/// Counts calls that reach the wrapped transport.
struct Counting<T> {
    inner: T,
    calls: AtomicUsize,
}

impl<T: Transport> Transport for Counting<T> {
    fn send(&self, req: &WireRequest) -> Result<Vec<u8>> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.send(req)
    }
}

fn counting(script: ScriptedTransport) -> Arc<Counting<ScriptedTransport>> {
    Arc::new(Counting {
        inner: script,
        calls: AtomicUsize::new(0),
    })
}

#[test]
fn cache_serves_hits_without_calling_the_backend() {
    let dir = tempfile::tempdir().unwrap();
    let inner = counting(ScriptedTransport::new().generation("p", "answer"));
    let p = OpenAiProvider::new(CachedTransport::new(inner.clone(), dir.path()), "m");
    let req = GenerationRequest::greedy("p", 8);
    for _ in 0..3 {
        assert_eq!(generate(&p, &req).unwrap(), "answer");
    }
    assert_eq!(inner.calls.load(Ordering::SeqCst), 1);

    let empty = counting(ScriptedTransport::new());
    let replay = OpenAiProvider::new(
        CachedTransport::new(empty.clone(), dir.path()).with_mode(CacheMode::Replay),
        "m",
    );
    assert_eq!(generate(&replay, &req).unwrap(), "answer");
    let miss = generate(&replay, &GenerationRequest::greedy("other", 8)).unwrap_err();
    assert!(matches!(miss, Error::CacheMiss { .. }));
    assert_eq!(empty.calls.load(Ordering::SeqCst), 0);
}

#[test]
fn sampled_requests_bypass_the_cache() {
    let dir = tempfile::tempdir().unwrap();
    let req = GenerationRequest {
        temperature: 0.7,
        ..GenerationRequest::greedy("p", 8)
    };
    let wire = WireRequest::new(
        Route::Completions,
        json!({"model": "m", "prompt": "p", "max_tokens": 8, "temperature": 0.7}),
    );
    assert!(!wire.is_deterministic());
    let inner = counting(ScriptedTransport::new().response_for(&wire, json!({"choices": [{"text": "x"}]})));
    let p = OpenAiProvider::new(CachedTransport::new(inner.clone(), dir.path()), "m");
    let _ = generate(&p, &req);
    let _ = generate(&p, &req);
    assert_eq!(inner.calls.load(Ordering::SeqCst), 2);
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn concurrent_writers_leave_one_complete_entry() {
    let dir = tempfile::tempdir().unwrap();
    let inner = counting(ScriptedTransport::new().generation("p", "answer"));
    let cached = Arc::new(CachedTransport::new(inner, dir.path()));
    std::thread::scope(|s| {
        for _ in 0..16 {
            let cached = cached.clone();
            s.spawn(move || {
                let p = OpenAiProvider::new(cached, "m");
                assert_eq!(generate(&p, &GenerationRequest::greedy("p", 8)).unwrap(), "answer");
            });
        }
    });
    let shards: Vec<_> = std::fs::read_dir(dir.path()).unwrap().collect();
    assert_eq!(shards.len(), 1);
    let files: Vec<_> = std::fs::read_dir(shards[0].as_ref().unwrap().path()).unwrap().collect();
    assert_eq!(files.len(), 1);
}
