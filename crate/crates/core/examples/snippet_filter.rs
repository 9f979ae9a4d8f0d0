/*
Snippet filtering. The mock filter answers from a verdict table; with
`--endpoint http://host:port` the same pool goes through a remote filter
service speaking the `/v1/health` + `/v1/verdict` contract.

Run with:
```
cargo run --example snippet_filter
cargo run --example snippet_filter -- --endpoint http://127.0.0.1:8700
```
*/

use std::sync::Arc;
use std::time::Duration;

use anyhow::Result;
use rag2::demo::{self, DemoBackend};
use rag2::filter::{filter_pool, RemoteFilter, SnippetFilter, DEFAULT_DECISION_THRESHOLD};
use rag2::rationale::{generate_rationale, rationale_query, PromptTemplate, QueryOptions};
use rag2::retrieval::RetrievalConfig;

fn main() -> Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let filter: Box<dyn SnippetFilter> = match args.iter().position(|a| a == "--endpoint") {
        Some(i) => Box::new(RemoteFilter::connect(
            &args[i + 1],
            DEFAULT_DECISION_THRESHOLD,
            Duration::from_secs(30),
            1,
        )?),
        None => Box::new(demo::mock_filter()),
    };
    println!("filter {}", filter.filter_id());

    let providers = demo::providers(Arc::new(DemoBackend::new()));
    let retriever = demo::retriever(&providers)?;
    let item = &demo::items()[10];
    let template = PromptTemplate::mcqa();
    let closed = generate_rationale(providers.generator.as_ref(), &template, item, &[], 512)?;
    let query = rationale_query(&closed, &item.question, QueryOptions::default())?;
    let retrieval = retriever.retrieve(&query.text, &item.question, &RetrievalConfig {
        final_k: 4,
        ..demo::retrieval_config()
    })?;
    let ranked: Vec<_> = retrieval
        .selected
        .iter()
        .map(|s| Ok((retriever.store().get(&s.snippet_id)?.clone(), s.clone())))
        .collect::<rag2::Result<_>>()?;

    let outcome = filter_pool(filter.as_ref(), &item.question, &ranked)?;
    for j in outcome.kept.iter().chain(&outcome.dropped) {
        println!(
            "  {:<5} {:.2}  {}",
            if j.verdict.helpful { "keep" } else { "drop" },
            j.verdict.score,
            j.snippet.snippet_id
        );
    }
    println!("kept {:?}", outcome.kept_ids());
    Ok(())
}
