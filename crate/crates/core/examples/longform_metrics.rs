/*
Long-form answers scored with ROUGE-L (longest common subsequence over
lowercased word tokens) and BERTScore with per-token embeddings from the
embedding provider.

Run with:
```
cargo run --example longform_metrics
```
*/

use std::sync::Arc;

use anyhow::Result;
use rag2::demo::{self, DemoBackend};
use rag2::metrics::{lcs_length, rouge_l, tokenize};
use rag2::pipeline::Mode;

fn main() -> Result<()> {
    let c = tokenize("The cat sat.");
    let r = tokenize("the cat");
    let prf = rouge_l("The cat sat.", "the cat");
    println!("LCS({c:?}, {r:?}) = {}", lcs_length(&c, &r));
    println!("ROUGE-L p {:.4} r {:.4} f1 {:.4}", prf.precision, prf.recall, prf.f1);

    let backend = Arc::new(DemoBackend::new());
    let providers = demo::providers(backend.clone());
    let engine = demo::engine(backend)?;
    let report = engine.longform_eval(&demo::longform_pairs(), &Mode::ClosedBook, providers.embedder.as_ref())?;
    for p in &report.pairs {
        println!("{}: rouge-l f1 {:.4}  bertscore f1 {:.4}", p.id, p.rouge_l.f1, p.bert_score.f1);
    }
    println!(
        "mean rouge-l f1 {:.4}, mean bertscore f1 {:.4} ({})",
        report.mean_rouge_l.f1, report.mean_bert_score.f1, report.tokenization
    );
    Ok(())
}
