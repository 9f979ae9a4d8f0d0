use std::io::Write;
use std::time::Instant;

use proptest::prelude::*;
use rag2::corpus::{chunk_document, ingest, parse_snippet_id, snippet_id, ChunkParams, SourceDocument};
use rag2::providers::Vector;
use rag2::vindex::{load_index, save_index, VectorIndex};
use rag2::Error;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn doc(body: &str) -> SourceDocument {
    SourceDocument {
        doc_id: "d".into(),
        corpus_id: "c".into(),
        title: None,
        body: body.into(),
    }
}

fn write_file(lines: &[String]) -> tempfile::NamedTempFile {
    let mut f = tempfile::NamedTempFile::new().unwrap();
    for l in lines {
        writeln!(f, "{l}").unwrap();
    }
    f
}

proptest! {
    #[test]
    fn windows_cover_the_word_sequence(
        words in prop::collection::vec("[a-zé]{1,6}", 1..120),
        seps in prop::collection::vec(prop::sample::select(vec![" ", "  ", "\n", "\t "]), 120),
        window in 1usize..30,
        overlap_frac in 0.0f64..1.0,
    ) {
        let overlap = ((window as f64) * overlap_frac) as usize % window;
        let body: String = words.iter().zip(&seps).map(|(w, s)| format!("{w}{s}")).collect();
        let snippets = chunk_document(&doc(&body), ChunkParams::new(window, overlap).unwrap()).unwrap();
        let stride = window - overlap;

        // Independent oracle: word windows starting at multiples of the stride.
        let mut expected = Vec::new();
        let mut start = 0;
        loop {
            let end = (start + window).min(words.len());
            expected.push(words[start..end].to_vec());
            if end == words.len() { break; }
            start += stride;
        }
        let got: Vec<Vec<String>> = snippets.iter().map(|s| s.text.split_whitespace().map(String::from).collect()).collect();
        prop_assert_eq!(&got, &expected);

        let mut rebuilt: Vec<String> = Vec::new();
        for (i, s) in got.iter().enumerate() {
            let take = if i + 1 == got.len() { s.len() } else { stride };
            rebuilt.extend(s[..take].iter().cloned());
        }
        prop_assert_eq!(rebuilt, words);
        for (i, s) in snippets.iter().enumerate() {
            prop_assert_eq!(&body[s.span.0..s.span.1], s.text.as_str());
            prop_assert_eq!(s.seq, i);
        }
    }

    #[test]
    fn snippet_ids_round_trip(c in "[a-z0-9_.-]{1,10}", d in "[A-Za-z0-9_.:-]{1,16}", seq in 0usize..100_000) {
        let id = snippet_id(&c, &d, seq).unwrap();
        prop_assert_eq!(parse_snippet_id(&id).unwrap(), (c, d, seq));
    }
}

#[test]
fn ingest_count_matches_per_document_chunking() {
    let body_a: String = (0..173).map(|i| format!("alpha{i} ")).collect();
    let body_b: String = (0..41).map(|i| format!("beta{i} ")).collect();
    let lines = vec![
        serde_json::json!({"doc_id": "a", "title": "A", "body": body_a}).to_string(),
        String::new(),
        serde_json::json!({"doc_id": "b", "body": body_b}).to_string(),
    ];
    let f = write_file(&lines);
    let params = ChunkParams::new(50, 10).unwrap();
    let (entry, snippets) = ingest(f.path(), "corp", params).unwrap();

    let per_doc: usize = [("a", body_a), ("b", body_b)]
        .iter()
        .map(|(id, body)| {
            let d = SourceDocument {
                doc_id: id.to_string(),
                corpus_id: "corp".into(),
                title: None,
                body: body.clone(),
            };
            chunk_document(&d, params).unwrap().len()
        })
        .sum();
    assert_eq!(entry.snippet_count, per_doc);
    assert_eq!(snippets.len(), per_doc);
    assert_eq!(per_doc, 5 + 1);
    assert!(snippets.iter().all(|s| s.corpus_id == "corp"));
    assert_eq!(snippets[0].retrieval_text().split(" — ").next(), Some("A"));

    let (_, again) = ingest(f.path(), "corp", params).unwrap();
    assert_eq!(again, snippets);
}

#[test]
fn empty_file_yields_an_empty_corpus() {
    let f = write_file(&[]);
    let (entry, snippets) = ingest(f.path(), "empty", ChunkParams::default()).unwrap();
    assert_eq!(entry.snippet_count, 0);
    assert!(snippets.is_empty());
}

#[test]
fn ingest_errors_name_the_line() {
    let f = write_file(&[r#"{"doc_id": "x", "title": "no body"}"#.into()]);
    match ingest(f.path(), "c", ChunkParams::default()).unwrap_err() {
        Error::Ingest { line, message, .. } => {
            assert_eq!(line, 1);
            assert!(message.contains("body"), "{message}");
        }
        other => panic!("unexpected {other:?}"),
    }

    let f = write_file(&[r#"{"doc_id": "x", "body": "b"}"#.into(), String::new(), "{not json".into()]);
    assert!(matches!(ingest(f.path(), "c", ChunkParams::default()), Err(Error::Ingest { line: 3, .. })));

    let f = write_file(&[r#"{"doc_id": "x", "body": "b"}"#.into(), r#"{"doc_id": "x", "body": "c"}"#.into()]);
    assert!(matches!(ingest(f.path(), "c", ChunkParams::default()), Err(Error::DuplicateDocument { .. })));

    let f = write_file(&[r#"{"doc_id": "x", "body": "   "}"#.into()]);
    assert!(matches!(ingest(f.path(), "c", ChunkParams::default()), Err(Error::EmptyDocument { .. })));
}

fn random_index(rng: &mut StdRng, corpus: &str, n: usize, dim: usize) -> VectorIndex {
    let ids = (0..n).map(|i| format!("{corpus}/doc{i}#0")).collect();
    let rows = (0..n)
        .map(|_| Vector::new((0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap())
        .collect();
    VectorIndex::from_rows(corpus, ids, rows, format!("rand#{dim}")).unwrap()
}

#[test]
fn saved_index_answers_queries_identically() {
    let mut rng = StdRng::seed_from_u64(7);
    let index = random_index(&mut rng, "c", 500, 24);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.vidx");
    save_index(&index, &path).unwrap();
    let loaded = load_index(&path).unwrap();
    assert_eq!(loaded, index);
    for _ in 0..100 {
        let q = Vector::new((0..24).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap();
        let k = rng.random_range(1..=20);
        assert_eq!(loaded.top_k(&q, k).unwrap(), index.top_k(&q, k).unwrap());
    }
}

#[test]
fn corrupt_or_mismatched_index_files_are_rejected() {
    let mut rng = StdRng::seed_from_u64(8);
    let index = random_index(&mut rng, "c", 20, 4);
    let mut bytes = index.to_bytes();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x40;
    assert!(matches!(VectorIndex::from_bytes(&bytes), Err(Error::CorruptIndex(_))));
    assert!(matches!(VectorIndex::from_bytes(&bytes[..10]), Err(Error::CorruptIndex(_))));
    assert!(matches!(index.check_fingerprint("other#4"), Err(Error::Fingerprint { .. })));
    let q = Vector::new(vec![1.0; 5]).unwrap();
    assert!(matches!(index.top_k(&q, 3), Err(Error::Dim { expected: 4, actual: 5 })));
}

#[test]
fn ten_thousand_snippet_index_round_trips_and_queries_fast() {
    let mut rng = StdRng::seed_from_u64(9);
    let index = random_index(&mut rng, "big", 10_000, 64);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("big.vidx");
    save_index(&index, &path).unwrap();
    let loaded = load_index(&path).unwrap();
    assert_eq!(loaded.len(), 10_000);
    let start = Instant::now();
    for _ in 0..20 {
        let q = Vector::new((0..64).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap();
        let hits = loaded.top_k(&q, 10).unwrap();
        assert_eq!(hits.len(), 10);
    }
    assert!(start.elapsed().as_secs_f64() < 10.0);
}
