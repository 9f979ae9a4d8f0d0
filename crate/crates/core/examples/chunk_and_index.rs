/*
Chunk a small document file into overlapping snippets, embed them into a flat
index, round-trip the index through disk and run an exact top-k query.

Run with:
```
cargo run --example chunk_and_index
```
*/

use std::sync::Arc;

use anyhow::Result;
use rag2::corpus::{ingest, ChunkParams};
use rag2::demo::{DemoBackend, EMBED_MODEL};
use rag2::providers::{embed_batch, EmbedRole, OpenAiProvider};
use rag2::vindex::{build_index, load_index, save_index};

const DOCS: &str = r#"{"doc_id":"niv","title":"Non-invasive ventilation","body":"BiPAP delivers two pressure levels. Inspiratory support unloads the respiratory muscles and expiratory pressure keeps small airways open. In hypercapnic COPD exacerbations it lowers intubation rates."}
{"doc_id":"o2","title":"Oxygen therapy","body":"Controlled oxygen targets saturations of 88 to 92 percent in patients at risk of carbon dioxide retention."}
"#;

fn main() -> Result<()> {
    let dir = tempfile::tempdir()?;
    let input = dir.path().join("docs.jsonl");
    std::fs::write(&input, DOCS)?;

    // Twelve-word windows with four words of overlap, so the first document
    // spans several snippets.
    let params = ChunkParams::new(12, 4)?;
    let (entry, snippets) = ingest(&input, "guidelines", params)?;
    println!("{}: {} snippets", entry.corpus_id, entry.snippet_count);
    for s in &snippets {
        println!("  {:<20} bytes {:>3}..{:<3} {}", s.snippet_id, s.span.0, s.span.1, s.text);
    }

    let embedder = OpenAiProvider::new(Arc::new(DemoBackend::new()), EMBED_MODEL);
    let (index, meta) = build_index(&snippets, &embedder)?;
    println!("indexed {} rows (dim {}) in {:?}", meta.rows, index.dim(), meta.elapsed);

    let path = dir.path().join("guidelines.vidx");
    save_index(&index, &path)?;
    let index = load_index(&path)?;
    println!("reloaded, fingerprint {}", index.fingerprint());

    let query = embed_batch(&embedder, &["pressure support for hypercapnia".to_string()], EmbedRole::Query)?.remove(0);
    for hit in index.top_k(&query, 3)? {
        println!("  {:+.4}  {}", hit.score, hit.snippet_id);
    }
    Ok(())
}
