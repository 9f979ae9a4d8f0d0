/*
Retriever bias in miniature: four corpora of very different sizes, all
equally relevant to the query. Stacked retrieval (one global top-k) is
dominated by the largest corpus; balanced retrieval takes the same quota
from each.

Run with:
```
cargo run --example balanced_retrieval
```
*/

use anyhow::Result;
use rag2::providers::Vector;
use rag2::retrieval::{balanced_retrieve, stacked_retrieve};
use rag2::vindex::VectorIndex;

fn corpus(name: &str, size: usize, relevance: f32) -> Result<VectorIndex> {
    let ids = (0..size).map(|i| format!("{name}/doc{i:04}#0")).collect();
    let rows = (0..size)
        .map(|i| Vector::new(vec![relevance - i as f32 * 1e-4, 1.0]))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(VectorIndex::from_rows(name, ids, rows, "toy#2")?)
}

fn main() -> Result<()> {
    // The big corpus scores marginally higher across the board, as a corpus
    // resembling the retriever's training data would.
    let indices = vec![
        corpus("pubmed", 100, 1.00)?,
        corpus("pmc", 50, 0.98)?,
        corpus("textbooks", 10, 0.97)?,
        corpus("guidelines", 2, 0.96)?,
    ];
    let query = Vector::new(vec![1.0, 0.0])?;
    let k = 2;

    let stacked = stacked_retrieve(&indices, &query, k, "query")?;
    let balanced = balanced_retrieve(&indices, &query, k, "query")?;
    println!("{:<12} {:>8} {:>9}", "corpus", "stacked", "balanced");
    for (c, n) in &balanced.per_corpus_counts {
        println!("{c:<12} {:>8} {n:>9}", stacked.per_corpus_counts[c]);
    }
    println!("balanced pool order: {:?}", balanced.ids());
    Ok(())
}
