/*
Chain-of-thought prompting: render the closed-book prompt for an item,
generate a rationale, extract the answer, and turn the rationale into a
retrieval query with the answer sentence removed.

Run with:
```
cargo run --example rationale_prompting
```
*/

use std::sync::Arc;

use anyhow::Result;
use rag2::demo::{self, DemoBackend, LLM_MODEL};
use rag2::providers::OpenAiProvider;
use rag2::rationale::{build_cot_prompt, generate_rationale, rationale_query, PromptTemplate, QueryOptions};

fn main() -> Result<()> {
    let llm = OpenAiProvider::new(Arc::new(DemoBackend::new()), LLM_MODEL);
    let template = PromptTemplate::mcqa();
    let item = &demo::items()[6];

    println!("--- prompt (template {}) ---", &template.digest()[..12]);
    println!("{}", build_cot_prompt(&template, item, &[]));

    let record = generate_rationale(&llm, &template, item, &[], 512)?;
    println!("--- rationale ---\n{}", record.rationale_text);
    println!("extracted {:?}, gold {}", record.extracted_option, item.gold);

    let query = rationale_query(&record, &item.question, QueryOptions::default())?;
    println!("--- retrieval query ---\n{}", query.text);
    assert!(!query.text.contains(&item.question));

    // A grounded second pass with the document the rationale retrieves.
    let snippet = demo::corpus_snippets("textbooks")
        .into_iter()
        .find(|s| s.doc_id == "q07-niv")
        .expect("demo snippet");
    let grounded = generate_rationale(&llm, &template, item, &[snippet], 512)?;
    println!("--- with document ---\n{}", grounded.rationale_text);
    println!("extracted {:?}", grounded.extracted_option);
    Ok(())
}
