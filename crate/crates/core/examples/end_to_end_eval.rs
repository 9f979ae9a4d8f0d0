/*
Full pipeline on the demo world: closed-book, plain RAG, rationale-query RAG
and the complete method (balanced retrieval, rerank, filter), plus a stacked
ablation. Writes reports and predictions under a temp directory.

Run with:
```
cargo run --example end_to_end_eval
```
*/

use std::sync::Arc;

use anyhow::Result;
use rag2::demo::{self, DemoBackend};
use rag2::pipeline::{compare_modes, Mode};

fn main() -> Result<()> {
    let engine = demo::engine(Arc::new(DemoBackend::new()))?;
    let data = demo::dataset();
    let modes: Vec<Mode> = ["closed_book", "rag_plain", "rag_rationale", "rag2_full", "ablation:stacked+rerank"]
        .iter()
        .map(|m| m.parse())
        .collect::<Result<_, _>>()?;

    let cmp = compare_modes(&engine, &data, &modes)?;
    print!("{}", cmp.table());

    let full = &cmp.evaluations[3];
    for r in full.predictions.iter().filter(|r| r.fallback || !r.correct) {
        println!(
            "{}: predicted {:?}, gold {}, kept {:?}, fallback {}",
            r.item_id, r.predicted, r.gold, r.kept, r.fallback
        );
    }

    let dir = tempfile::tempdir()?;
    let report = dir.path().join("rag2_full.json");
    full.write(&report)?;
    println!("config digest {}", full.report.config_digest);
    println!("wrote {}", report.display());
    Ok(())
}
