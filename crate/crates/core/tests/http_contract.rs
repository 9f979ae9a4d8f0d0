mod common;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use common::FakeServer;
use rag2::demo::{self, DemoBackend};
use rag2::filter::{filter_pool, verdict, RemoteFilter, SnippetFilter};
use rag2::pipeline::{evaluate, Mode};
use rag2::providers::{
    embed_batch, generate, rerank_scores, score_logprobs, EmbedRole, GenerationRequest, HttpTransport, OpenAiProvider,
    RetryPolicy, Route, Transport, WireRequest,
};
use rag2::vindex::{ScoreKind, ScoredSnippet};
use rag2::Error;
use serde_json::{json, Value};

fn fast_retry(max_retries: u32) -> RetryPolicy {
    RetryPolicy {
        max_retries,
        base_delay: Duration::from_millis(1),
        max_delay: Duration::from_millis(5),
    }
}

fn http(url: &str, max_retries: u32) -> HttpTransport {
    HttpTransport::new(url, None, Duration::from_secs(10), fast_retry(max_retries))
}

#[test]
fn persistent_server_error_exhausts_retries() {
    let server = FakeServer::start(|_| (500, "{}".into()));
    let err = http(&server.url, 2).post("/v1/completions", b"{}").unwrap_err();
    match err {
        Error::RetryExhausted { attempts, .. } => assert_eq!(attempts, 3),
        other => panic!("unexpected {other:?}"),
    }
    assert_eq!(server.hits("/v1/completions"), 3);
}

#[test]
fn transient_errors_are_retried_until_success() {
    let calls = AtomicUsize::new(0);
    let server = FakeServer::start(move |_| match calls.fetch_add(1, Ordering::SeqCst) {
        0 => (503, "busy".into()),
        1 => (429, "slow down".into()),
        _ => (200, json!({"choices": [{"text": "ok"}]}).to_string()),
    });
    let p = OpenAiProvider::new(http(&server.url, 3), "m");
    assert_eq!(generate(&p, &GenerationRequest::greedy("hi", 4)).unwrap(), "ok");
    assert_eq!(server.requests().len(), 3);
}

#[test]
fn client_errors_fail_without_retry() {
    let server = FakeServer::start(|_| (400, "bad request".into()));
    let err = http(&server.url, 5).post("/v1/embeddings", b"{}").unwrap_err();
    assert!(matches!(err, Error::RequestRejected { status: 400, .. }), "{err:?}");
    assert_eq!(server.requests().len(), 1);
}

#[test]
fn unreachable_endpoint_exhausts_retries() {
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let err = http(&format!("http://127.0.0.1:{port}"), 1).post("/v1/completions", b"{}").unwrap_err();
    assert!(matches!(err, Error::RetryExhausted { attempts: 2, .. }), "{err:?}");
}

#[test]
fn endpoint_with_v1_suffix_and_api_key() {
    let server = FakeServer::start(|_| (200, json!({"choices": [{"message": {"content": "chat"}}]}).to_string()));
    let t = HttpTransport::new(
        &format!("{}/v1/", server.url),
        Some("sekret".into()),
        Duration::from_secs(5),
        fast_retry(0),
    );
    let p = OpenAiProvider::new(t, "m").with_api(rag2::providers::ApiStyle::Chat);
    assert_eq!(generate(&p, &GenerationRequest::greedy("hi", 4)).unwrap(), "chat");
    let req = &server.requests()[0];
    assert_eq!(req.path, "/v1/chat/completions");
    assert_eq!(req.header("authorization"), Some("Bearer sekret"));
    let body = req.json();
    assert_eq!(body["messages"][0]["content"], "hi");
    assert_eq!(body["temperature"], 0.0);
}

#[test]
fn echo_logprobs_are_split_at_the_target_boundary() {
    let server = FakeServer::start(|req| {
        let body = req.json();
        assert_eq!(body["echo"], true);
        assert_eq!(body["max_tokens"], 0);
        assert_eq!(body["prompt"], "Q: 2+2? A: four.");
        let resp = json!({"choices": [{"text": "Q: 2+2? A: four.", "logprobs": {
            "tokens": ["Q:", " 2+2?", " A:", " four", "."],
            "token_logprobs": [null, -3.0, -0.5, -0.25, -0.125],
            "text_offset": [0, 2, 7, 10, 15]
        }}]});
        (200, resp.to_string())
    });
    let p = OpenAiProvider::new(http(&server.url, 0), "m");
    let seq = score_logprobs(&p, "Q: 2+2? A:", " four.").unwrap();
    assert_eq!(seq.tokens, vec![" four", "."]);
    assert_eq!(seq.logprobs, vec![-0.25, -0.125]);
}

#[test]
fn echo_without_boundary_token_is_a_protocol_error() {
    let server = FakeServer::start(|_| {
        let resp = json!({"choices": [{"text": "ab", "logprobs": {
            "tokens": ["ab"], "token_logprobs": [-1.0], "text_offset": [0]
        }}]});
        (200, resp.to_string())
    });
    let p = OpenAiProvider::new(http(&server.url, 0), "m");
    assert!(matches!(score_logprobs(&p, "a", "b"), Err(Error::Protocol(_))));
}

#[test]
fn embeddings_honor_index_field_and_role() {
    let server = FakeServer::start(|req| {
        let body = req.json();
        let inputs = body["input"].as_array().unwrap().clone();
        // Reverse the data order; the client must reorder by index.
        let data: Vec<Value> = inputs
            .iter()
            .enumerate()
            .rev()
            .map(|(i, t)| json!({"index": i, "embedding": [t.as_str().unwrap().len() as f32, i as f32]}))
            .collect();
        (200, json!({"data": data, "input_type": body["input_type"]}).to_string())
    });
    let p = OpenAiProvider::new(http(&server.url, 0), "emb");
    let texts: Vec<String> = ["a", "bbb", "cc"].iter().map(|s| s.to_string()).collect();
    let vs = embed_batch(&p, &texts, EmbedRole::Query).unwrap();
    let firsts: Vec<f32> = vs.iter().map(|v| v.values()[0]).collect();
    assert_eq!(firsts, vec![1.0, 3.0, 2.0]);
    assert_eq!(server.requests()[0].json()["input_type"], "query");
}

#[test]
fn rerank_results_are_realigned_to_input_order() {
    let server = FakeServer::start(|req| {
        let body = req.json();
        assert_eq!(body["query"], "q");
        let docs = body["documents"].as_array().unwrap();
        let mut results: Vec<Value> = docs
            .iter()
            .enumerate()
            .map(|(i, d)| json!({"index": i, "relevance_score": d.as_str().unwrap().len() as f64}))
            .collect();
        results.sort_by(|a, b| b["relevance_score"].as_f64().partial_cmp(&a["relevance_score"].as_f64()).unwrap());
        (200, json!({"results": results}).to_string())
    });
    let p = OpenAiProvider::new(http(&server.url, 0), "rr");
    let docs: Vec<String> = ["xx", "x", "xxxx"].iter().map(|s| s.to_string()).collect();
    assert_eq!(rerank_scores(&p, "q", &docs).unwrap(), vec![2.0, 1.0, 4.0]);
}

fn verdict_server(threshold: f64, fail_after: Option<usize>) -> FakeServer {
    let calls = AtomicUsize::new(0);
    FakeServer::start(move |req| match req.path.as_str() {
        "/v1/health" => (200, json!({"status": "ok", "filter_id": "sha256:abc"}).to_string()),
        "/v1/verdict" => {
            if fail_after.is_some_and(|n| calls.fetch_add(1, Ordering::SeqCst) >= n) {
                return (503, "down".into());
            }
            let body = req.json();
            let verdicts: Vec<Value> = body["pairs"]
                .as_array()
                .unwrap()
                .iter()
                .map(|p| {
                    let score = if p["snippet"].as_str().unwrap().contains("useful") { 0.9 } else { 0.2 };
                    json!({"snippet_id": p["snippet_id"], "score": score, "helpful": score >= threshold})
                })
                .collect();
            (200, json!({"verdicts": verdicts}).to_string())
        }
        _ => (404, "no route".into()),
    })
}

fn snippet(id: usize, text: &str) -> rag2::corpus::Snippet {
    rag2::corpus::Snippet {
        snippet_id: format!("c/d{id}#0"),
        corpus_id: "c".into(),
        doc_id: format!("d{id}"),
        seq: 0,
        title: None,
        text: text.into(),
        span: (0, text.len()),
    }
}

fn ranked(texts: &[&str]) -> Vec<(rag2::corpus::Snippet, ScoredSnippet)> {
    texts
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let s = snippet(i, t);
            let scored = ScoredSnippet {
                snippet_id: s.snippet_id.clone(),
                corpus_id: "c".into(),
                score: -(i as f64),
                score_kind: ScoreKind::Rerank,
            };
            (s, scored)
        })
        .collect()
}

#[test]
fn remote_filter_health_and_verdict_contract() {
    let server = verdict_server(0.5, None);
    let filter = RemoteFilter::connect(&server.url, 0.5, Duration::from_secs(5), 0).unwrap();
    assert_eq!(filter.filter_id(), "remote:sha256:abc@0.5");
    assert_eq!(filter.health().unwrap().status, "ok");

    let pool = ranked(&["useful one", "noise", "useful two"]);
    let out = filter_pool(&filter, "why?", &pool).unwrap();
    assert_eq!(out.kept_ids(), vec!["c/d0#0", "c/d2#0"]);
    assert_eq!(out.dropped.len(), 1);
    assert!(out.kept.iter().chain(&out.dropped).all(|j| j.verdict.helpful == (j.verdict.score >= 0.5)));

    let req = server.requests().into_iter().find(|r| r.path == "/v1/verdict").unwrap();
    assert_eq!(req.method, "POST");
    let body = req.json();
    let pairs = body["pairs"].as_array().unwrap();
    assert_eq!(pairs.len(), 3);
    assert_eq!(pairs[1], json!({"question": "why?", "snippet": "noise", "snippet_id": "c/d1#0"}));
}

#[test]
fn local_threshold_decides_helpfulness() {
    let server = verdict_server(0.5, None);
    let strict = RemoteFilter::new(&server.url, 0.95, Duration::from_secs(5), 0);
    let v = verdict(&strict, "why?", &snippet(0, "useful")).unwrap();
    assert_eq!(v.score, 0.9);
    assert!(!v.helpful);
}

#[test]
fn filter_outage_carries_partial_verdicts() {
    let server = verdict_server(0.5, Some(1));
    let filter = RemoteFilter::new(&server.url, 0.5, Duration::from_secs(5), 0);
    let texts: Vec<String> = (0..40).map(|i| format!("useful {i}")).collect();
    let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
    match filter_pool(&filter, "why?", &ranked(&refs)) {
        Err(Error::FilterUnavailable { partial, .. }) => assert_eq!(partial.len(), 32),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn unhealthy_filter_refuses_to_connect() {
    let server = FakeServer::start(|_| (200, json!({"status": "loading", "filter_id": "x"}).to_string()));
    let err = RemoteFilter::connect(&server.url, 0.5, Duration::from_secs(5), 0).err().unwrap();
    assert!(matches!(err, Error::FilterUnavailable { .. }));
}

#[test]
fn misaligned_verdicts_are_rejected() {
    let server = FakeServer::start(|_| {
        (200, json!({"verdicts": [{"snippet_id": "other", "score": 0.9, "helpful": true}]}).to_string())
    });
    let filter = RemoteFilter::new(&server.url, 0.5, Duration::from_secs(5), 0);
    assert!(matches!(verdict(&filter, "q", &snippet(0, "s")), Err(Error::Protocol(_))));
}

fn route(path: &str) -> Route {
    match path {
        "/v1/completions" => Route::Completions,
        "/v1/chat/completions" => Route::ChatCompletions,
        "/v1/embeddings" => Route::Embeddings,
        "/v1/rerank" => Route::Rerank,
        other => panic!("unexpected route {other}"),
    }
}

/// Model server and filter service both behind HTTP; the run must match the
/// in-process run record for record.
#[test]
fn demo_pipeline_over_http_matches_in_process_run() {
    let backend = DemoBackend::new();
    let models = FakeServer::start(move |req| {
        let wire = WireRequest::new(route(&req.path), req.json());
        (200, String::from_utf8(backend.send(&wire).unwrap()).unwrap())
    });
    let mock = demo::mock_filter();
    let snippets = demo::all_snippets();
    let filter_service = FakeServer::start(move |req| match req.path.as_str() {
        "/v1/health" => (200, json!({"status": "ok", "filter_id": "demo"}).to_string()),
        _ => {
            let body = req.json();
            let verdicts: Vec<Value> = body["pairs"]
                .as_array()
                .unwrap()
                .iter()
                .map(|p| {
                    let s = snippets.iter().find(|s| s.snippet_id == p["snippet_id"]).unwrap();
                    let v = verdict(&mock, p["question"].as_str().unwrap(), s).unwrap();
                    json!({"snippet_id": s.snippet_id, "score": v.score, "helpful": v.helpful})
                })
                .collect();
            (200, json!({"verdicts": verdicts}).to_string())
        }
    });

    let transport = Arc::new(http(&models.url, 0));
    let p = demo::providers(transport);
    let retriever = demo::retriever(&p).unwrap();
    let remote = RemoteFilter::connect(&filter_service.url, 0.5, Duration::from_secs(10), 0).unwrap();
    let engine = rag2::pipeline::Engine::new(p.generator.clone())
        .with_retriever(retriever)
        .with_filter(Box::new(remote))
        .with_retrieval(demo::retrieval_config());
    let mode = Mode::Rag2Full;
    let over_http = evaluate(&engine, &demo::dataset(), &mode).unwrap();

    let local = evaluate(&demo::engine(Arc::new(DemoBackend::new())).unwrap(), &demo::dataset(), &mode).unwrap();
    assert_eq!(over_http.report.n_correct, 11);
    assert_eq!(over_http.predictions_jsonl().unwrap(), local.predictions_jsonl().unwrap());
    assert!(filter_service.hits("/v1/verdict") >= 12);
}
