/*
Perplexity-differential labeling on the demo world: every retrieved snippet is
scored by how much it changes the perplexity of the model's own closed-book
rationale, answer flips override the differential, and tau is calibrated so
the top quarter of unchanged-accuracy pairs count as helpful.

Run with:
```
cargo run --example perplexity_labeling
```
*/

use std::collections::BTreeMap;
use std::sync::Arc;

use anyhow::Result;
use rag2::demo::{self, DemoBackend};
use rag2::labeling::{build_label_dataset, export_labels, read_labels, LabelingConfig};
use rag2::rationale::PromptTemplate;

fn main() -> Result<()> {
    let providers = demo::providers(Arc::new(DemoBackend::new()));
    let retriever = demo::retriever(&providers)?;
    let cfg = LabelingConfig::default();
    let labels = build_label_dataset(
        &demo::items(),
        providers.generator.as_ref(),
        &retriever,
        &PromptTemplate::mcqa(),
        &cfg,
    )?;

    let cal = labels.calibration.as_ref().expect("unchanged-accuracy pairs exist");
    println!(
        "tau {:+.4} from {} deltas ({} tied at tau, {} pass)",
        cal.tau, cal.sample_size, cal.ties, cal.passing
    );
    let mut rules: BTreeMap<String, usize> = BTreeMap::new();
    for r in &labels.records {
        *rules.entry(format!("{:?} -> {:?}", r.rule_fired, r.label)).or_default() += 1;
    }
    for (rule, n) in rules {
        println!("  {rule:<28} {n}");
    }

    println!("q07 pairs:");
    for r in labels.records.iter().filter(|r| r.item_id == "q07") {
        println!(
            "  {:<32} ppl {:.4} -> {:.4}  delta {:+.4}  {:?}",
            r.snippet_id, r.ppl_without.ppl, r.ppl_with.ppl, r.delta_ppl, r.label
        );
    }

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("labels.jsonl");
    export_labels(&labels, cfg.percentile, &path)?;
    let reread = read_labels(&path)?;
    assert!(reread.iter().all(|r| r.rederive() == (r.label, r.rule_fired)));
    println!("exported {} records; labels re-derive from raw fields", reread.len());
    Ok(())
}
