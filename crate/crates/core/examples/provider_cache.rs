/*
Provider plumbing: a scripted backend behind the content-addressed response
cache, then the same requests replayed from cache alone. Set RAG2_ENDPOINT
(and optionally RAG2_MODEL, RAG2_API_KEY) to send one real completion through
the HTTP transport instead.

Run with:
```
cargo run --example provider_cache
RAG2_ENDPOINT=http://localhost:8000/v1 RAG2_MODEL=llama3 cargo run --example provider_cache
```
*/

use anyhow::Result;
use rag2::providers::{
    build_provider, cache_dir_digest, generate, score_logprobs, CacheMode, CachedTransport, GenerationRequest,
    OpenAiProvider, ProviderConfig, ScriptedTransport,
};

fn main() -> Result<()> {
    if let Ok(endpoint) = std::env::var("RAG2_ENDPOINT") {
        let model = std::env::var("RAG2_MODEL").unwrap_or_else(|_| "default".into());
        let provider = build_provider(&ProviderConfig::http(endpoint, model))?;
        let text = generate(provider.as_ref(), &GenerationRequest::greedy("Say hello.", 16))?;
        println!("live: {text}");
        return Ok(());
    }

    let script = ScriptedTransport::new()
        .generation("Is the sky blue?", "Rayleigh scattering favors short wavelengths, so the answer is (A).")
        .logprobs("Q: sky? A:", &[(" blue", -0.2), (".", -0.05)]);
    let dir = tempfile::tempdir()?;

    let warm = OpenAiProvider::new(CachedTransport::new(script, dir.path()), "scripted");
    let text = generate(&warm, &GenerationRequest::greedy("Is the sky blue?", 64))?;
    let lps = score_logprobs(&warm, "Q: sky? A:", " blue.")?;
    println!("generated: {text}");
    println!("target logprobs: {:?} (sum {:.2})", lps.logprobs, lps.sum_logprob());
    println!("cache digest after warm run: {}", cache_dir_digest(dir.path())?);

    // Replay never touches the inner transport: an empty script proves it.
    let replay = OpenAiProvider::new(
        CachedTransport::new(ScriptedTransport::new(), dir.path()).with_mode(CacheMode::Replay),
        "scripted",
    );
    assert_eq!(generate(&replay, &GenerationRequest::greedy("Is the sky blue?", 64))?, text);
    println!("replayed from cache: identical");
    let miss = generate(&replay, &GenerationRequest::greedy("Uncached prompt", 64));
    println!("uncached request in replay mode: {}", miss.unwrap_err());
    Ok(())
}
