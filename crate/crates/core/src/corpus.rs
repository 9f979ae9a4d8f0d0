//! Source documents, sliding-window chunking and corpus ingest.
//!
//! Windows are measured in whitespace-delimited words. A snippet's `span` is
//! a pair of UTF-8 byte offsets into the document body, so
//! `&body[span.0..span.1] == snippet.text` always holds.

use std::collections::HashSet;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_WINDOW: usize = 200;
pub const DEFAULT_OVERLAP: usize = 50;

/// Separator between title and chunk in [`Snippet::retrieval_text`].
pub const TITLE_SEPARATOR: &str = " — ";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceDocument {
    pub doc_id: String,
    pub corpus_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
    pub body: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Snippet {
    pub snippet_id: String,
    pub corpus_id: String,
    pub doc_id: String,
    pub seq: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
    pub text: String,
    pub span: (usize, usize),
}

impl Snippet {
    /// Text used for embedding, reranking and prompting: `"title — chunk"`
    /// when the source document has a title.
    pub fn retrieval_text(&self) -> String {
        match self.title.as_deref().filter(|t| !t.trim().is_empty()) {
            Some(title) => format!("{title}{TITLE_SEPARATOR}{}", self.text),
            None => self.text.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkParams {
    pub window: usize,
    pub overlap: usize,
}

impl Default for ChunkParams {
    fn default() -> Self {
        Self {
            window: DEFAULT_WINDOW,
            overlap: DEFAULT_OVERLAP,
        }
    }
}

impl ChunkParams {
    pub fn new(window: usize, overlap: usize) -> Result<Self> {
        let p = Self { window, overlap };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.window < 1 || self.overlap >= self.window {
            return Err(Error::invalid(format!(
                "chunking needs window > overlap >= 0 (window {}, overlap {})",
                self.window, self.overlap
            )));
        }
        Ok(())
    }

    pub fn stride(&self) -> usize {
        self.window - self.overlap
    }
}

/// Byte ranges of whitespace-delimited words.
fn word_spans(body: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut start = None;
    for (i, c) in body.char_indices() {
        match (c.is_whitespace(), start) {
            (true, Some(s)) => {
                spans.push((s, i));
                start = None;
            }
            (false, None) => start = Some(i),
            _ => {}
        }
    }
    if let Some(s) = start {
        spans.push((s, body.len()));
    }
    spans
}

/// Splits a document into overlapping word windows advancing by
/// `window - overlap` words. The last window may be shorter; a body shorter
/// than one window yields exactly one snippet.
pub fn chunk_document(doc: &SourceDocument, params: ChunkParams) -> Result<Vec<Snippet>> {
    params.validate()?;
    let words = word_spans(&doc.body);
    if words.is_empty() {
        return Err(Error::EmptyDocument {
            doc_id: doc.doc_id.clone(),
        });
    }
    let mut snippets = Vec::new();
    let mut start = 0;
    loop {
        let end = (start + params.window).min(words.len());
        let span = (words[start].0, words[end - 1].1);
        let seq = snippets.len();
        snippets.push(Snippet {
            snippet_id: snippet_id(&doc.corpus_id, &doc.doc_id, seq)?,
            corpus_id: doc.corpus_id.clone(),
            doc_id: doc.doc_id.clone(),
            seq,
            title: doc.title.clone(),
            text: doc.body[span.0..span.1].to_string(),
            span,
        });
        if end == words.len() {
            break;
        }
        start += params.stride();
    }
    Ok(snippets)
}

fn check_component(component: &str) -> Result<()> {
    if component.is_empty() {
        return Err(Error::InvalidId {
            component: component.to_string(),
            reason: "empty",
        });
    }
    if component.contains(['/', '#']) {
        return Err(Error::InvalidId {
            component: component.to_string(),
            reason: "contains '/' or '#'",
        });
    }
    Ok(())
}

/// `"corpus_id/doc_id#seq"`.
pub fn snippet_id(corpus_id: &str, doc_id: &str, seq: usize) -> Result<String> {
    check_component(corpus_id)?;
    check_component(doc_id)?;
    Ok(format!("{corpus_id}/{doc_id}#{seq}"))
}

pub fn parse_snippet_id(id: &str) -> Result<(String, String, usize)> {
    let bad = |reason| Error::InvalidId {
        component: id.to_string(),
        reason,
    };
    let (corpus, rest) = id.split_once('/').ok_or_else(|| bad("missing '/'"))?;
    let (doc, seq) = rest.split_once('#').ok_or_else(|| bad("missing '#'"))?;
    let seq = seq.parse().map_err(|_| bad("sequence is not a number"))?;
    check_component(corpus)?;
    check_component(doc)?;
    Ok((corpus.to_string(), doc.to_string(), seq))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub corpus_id: String,
    pub display_name: String,
    pub source_path: PathBuf,
    pub snippet_count: usize,
}

/// The set of corpora retrieval draws from. Order is registration order.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusRegistry {
    pub entries: Vec<RegistryEntry>,
}

impl CorpusRegistry {
    pub fn register(&mut self, entry: RegistryEntry) -> Result<()> {
        check_component(&entry.corpus_id)?;
        if self.get(&entry.corpus_id).is_some() {
            return Err(Error::invalid(format!("corpus {} already registered", entry.corpus_id)));
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn get(&self, corpus_id: &str) -> Option<&RegistryEntry> {
        self.entries.iter().find(|e| e.corpus_id == corpus_id)
    }

    pub fn corpus_ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.corpus_id.as_str())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let registry: Self = serde_json::from_slice(&fs::read(path)?)?;
        let mut seen = HashSet::new();
        for e in &registry.entries {
            if !seen.insert(&e.corpus_id) {
                return Err(Error::invalid(format!("duplicate corpus {} in registry", e.corpus_id)));
            }
        }
        Ok(registry)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        fs::write(path, bytes)?;
        Ok(())
    }
}

/// One line of a corpus input file.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DocumentLine {
    doc_id: String,
    #[serde(default)]
    corpus_id: Option<String>,
    #[serde(default)]
    title: Option<String>,
    body: String,
}

/// Streams snippets out of a JSONL document file, in document order.
pub struct SnippetStream<R> {
    lines: std::io::Lines<R>,
    path: PathBuf,
    corpus_id: String,
    params: ChunkParams,
    line_no: usize,
    seen: HashSet<String>,
    pending: std::vec::IntoIter<Snippet>,
    emitted: usize,
    failed: bool,
}

impl<R: BufRead> SnippetStream<R> {
    pub fn new(reader: R, path: impl Into<PathBuf>, corpus_id: &str, params: ChunkParams) -> Result<Self> {
        params.validate()?;
        check_component(corpus_id)?;
        Ok(Self {
            lines: reader.lines(),
            path: path.into(),
            corpus_id: corpus_id.to_string(),
            params,
            line_no: 0,
            seen: HashSet::new(),
            pending: Vec::new().into_iter(),
            emitted: 0,
            failed: false,
        })
    }

    /// Snippets yielded so far.
    pub fn emitted(&self) -> usize {
        self.emitted
    }

    fn ingest_error(&self, message: impl Into<String>) -> Error {
        Error::Ingest {
            path: self.path.clone(),
            line: self.line_no,
            message: message.into(),
        }
    }

    fn next_document(&mut self) -> Option<Result<Vec<Snippet>>> {
        loop {
            let line = match self.lines.next()? {
                Ok(l) => l,
                Err(e) => return Some(Err(e.into())),
            };
            self.line_no += 1;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: DocumentLine = match serde_json::from_str(&line) {
                Ok(d) => d,
                Err(e) => return Some(Err(self.ingest_error(e.to_string()))),
            };
            if let Some(c) = &parsed.corpus_id {
                if c != &self.corpus_id {
                    return Some(Err(self.ingest_error(format!(
                        "document declares corpus {c}, ingesting into {}",
                        self.corpus_id
                    ))));
                }
            }
            if let Err(e) = check_component(&parsed.doc_id) {
                return Some(Err(self.ingest_error(e.to_string())));
            }
            if !self.seen.insert(parsed.doc_id.clone()) {
                return Some(Err(Error::DuplicateDocument {
                    corpus_id: self.corpus_id.clone(),
                    doc_id: parsed.doc_id,
                }));
            }
            let doc = SourceDocument {
                doc_id: parsed.doc_id,
                corpus_id: self.corpus_id.clone(),
                title: parsed.title,
                body: parsed.body,
            };
            return Some(chunk_document(&doc, self.params));
        }
    }
}

impl<R: BufRead> Iterator for SnippetStream<R> {
    type Item = Result<Snippet>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        loop {
            if let Some(s) = self.pending.next() {
                self.emitted += 1;
                return Some(Ok(s));
            }
            match self.next_document()? {
                Ok(snippets) => self.pending = snippets.into_iter(),
                Err(e) => {
                    self.failed = true;
                    return Some(Err(e));
                }
            }
        }
    }
}

pub fn open_snippet_stream(path: &Path, corpus_id: &str, params: ChunkParams) -> Result<SnippetStream<BufReader<File>>> {
    SnippetStream::new(BufReader::new(File::open(path)?), path, corpus_id, params)
}

/// Ingests a whole JSONL corpus file. Output is a pure function of the file
/// bytes and chunk parameters.
pub fn ingest(path: &Path, corpus_id: &str, params: ChunkParams) -> Result<(RegistryEntry, Vec<Snippet>)> {
    let snippets = open_snippet_stream(path, corpus_id, params)?.collect::<Result<Vec<_>>>()?;
    let entry = RegistryEntry {
        corpus_id: corpus_id.to_string(),
        display_name: corpus_id.to_string(),
        source_path: path.to_path_buf(),
        snippet_count: snippets.len(),
    };
    Ok((entry, snippets))
}

pub fn write_snippets(path: &Path, snippets: &[Snippet]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for s in snippets {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_snippets(path: &Path) -> Result<Vec<Snippet>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Ingest {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn doc(body: &str) -> SourceDocument {
        SourceDocument {
            doc_id: "d1".into(),
            corpus_id: "pubmed".into(),
            title: None,
            body: body.into(),
        }
    }

    fn words(n: usize) -> String {
        (0..n).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ")
    }

    #[test]
    fn ten_words_window_four_overlap_two() {
        let d = doc(&words(10));
        let snippets = chunk_document(&d, ChunkParams::new(4, 2).unwrap()).unwrap();
        let texts: Vec<&str> = snippets.iter().map(|s| s.text.as_str()).collect();
        assert_eq!(texts, vec!["w0 w1 w2 w3", "w2 w3 w4 w5", "w4 w5 w6 w7", "w6 w7 w8 w9"]);
        assert_eq!(snippets[3].snippet_id, "pubmed/d1#3");
    }

    #[test]
    fn short_body_is_one_snippet() {
        let d = doc("  alpha beta\tgamma ");
        let snippets = chunk_document(&d, ChunkParams::new(4, 2).unwrap()).unwrap();
        assert_eq!(snippets.len(), 1);
        assert_eq!(snippets[0].text, "alpha beta\tgamma");
        assert_eq!(&d.body[snippets[0].span.0..snippets[0].span.1], snippets[0].text);
    }

    #[test]
    fn non_advancing_stride_rejected() {
        assert!(ChunkParams::new(4, 4).is_err());
        assert!(ChunkParams::new(0, 0).is_err());
        let d = doc("a b");
        assert!(chunk_document(&d, ChunkParams { window: 4, overlap: 5 }).is_err());
    }

    #[test]
    fn empty_body_rejected() {
        assert!(matches!(
            chunk_document(&doc(" \n "), ChunkParams::default()),
            Err(Error::EmptyDocument { .. })
        ));
    }

    #[test]
    fn last_window_may_be_short() {
        let snippets = chunk_document(&doc(&words(7)), ChunkParams::new(4, 1).unwrap()).unwrap();
        let texts: Vec<&str> = snippets.iter().map(|s| s.text.as_str()).collect();
        assert_eq!(texts, vec!["w0 w1 w2 w3", "w3 w4 w5 w6"]);
        let snippets = chunk_document(&doc(&words(8)), ChunkParams::new(4, 1).unwrap()).unwrap();
        assert_eq!(snippets.last().unwrap().text, "w6 w7");
    }

    #[test]
    fn title_prefixed_for_retrieval_but_not_in_span() {
        let mut d = doc("one two");
        d.title = Some("COPD".into());
        let s = &chunk_document(&d, ChunkParams::default()).unwrap()[0];
        assert_eq!(s.retrieval_text(), "COPD — one two");
        assert_eq!(s.text, "one two");
    }

    #[test]
    fn snippet_id_format_and_reserved_chars() {
        assert_eq!(snippet_id("pubmed", "12345", 0).unwrap(), "pubmed/12345#0");
        assert_ne!(snippet_id("a", "b", 1).unwrap(), snippet_id("a", "b", 2).unwrap());
        assert!(matches!(snippet_id("pub/med", "1", 0), Err(Error::InvalidId { .. })));
        assert!(matches!(snippet_id("pubmed", "1#2", 0), Err(Error::InvalidId { .. })));
        assert!(matches!(snippet_id("", "1", 0), Err(Error::InvalidId { .. })));
    }

    #[test]
    fn registry_rejects_duplicates() {
        let entry = RegistryEntry {
            corpus_id: "pmc".into(),
            display_name: "PMC".into(),
            source_path: "pmc.jsonl".into(),
            snippet_count: 0,
        };
        let mut reg = CorpusRegistry::default();
        reg.register(entry.clone()).unwrap();
        assert!(reg.register(entry).is_err());
    }

    proptest! {
        #[test]
        fn snippet_id_round_trips(
            corpus in "[a-z0-9_.-]{1,12}",
            doc_id in "[A-Za-z0-9_.:-]{1,16}",
            seq in 0usize..100_000,
        ) {
            let id = snippet_id(&corpus, &doc_id, seq).unwrap();
            prop_assert_eq!(parse_snippet_id(&id).unwrap(), (corpus, doc_id, seq));
        }

        #[test]
        fn chunks_cover_every_word_exactly(
            body_words in prop::collection::vec("[a-zé]{1,6}", 1..60),
            seps in prop::collection::vec(prop::sample::select(vec![" ", "  ", "\n", "\t "]), 60),
            window in 1usize..12,
            overlap_frac in 0.0f64..1.0,
        ) {
            let overlap = ((window as f64) * overlap_frac) as usize;
            let overlap = overlap.min(window - 1);
            let body: String = body_words.iter().zip(&seps).map(|(w, s)| format!("{s}{w}")).collect();
            let d = doc(&body);
            let params = ChunkParams::new(window, overlap).unwrap();
            let snippets = chunk_document(&d, params).unwrap();

            let mut rebuilt = Vec::new();
            for (i, s) in snippets.iter().enumerate() {
                prop_assert_eq!(s.seq, i);
                prop_assert_eq!(&d.body[s.span.0..s.span.1], s.text.as_str());
                let w: Vec<&str> = s.text.split_whitespace().collect();
                prop_assert!(w.len() <= window);
                let fresh = if i + 1 < snippets.len() { params.stride() } else { w.len() };
                rebuilt.extend(w.into_iter().take(fresh).map(str::to_string));
            }
            prop_assert_eq!(rebuilt, body_words);
        }
    }
}
