//! Chain-of-thought prompting, answer extraction and rationale queries.

use std::fmt;
use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::corpus::Snippet;
use crate::digest::sha256_hex;
use crate::error::{Error, Result};
use crate::providers::{generate, GenerationRequest, Provider};

pub const MCQA_TEMPLATE_V1: &str = include_str!("../assets/cot_mcqa_v1.txt");
pub const LONGFORM_TEMPLATE_V1: &str = include_str!("../assets/longform_v1.txt");
pub const EXTRACTION_PATTERNS_VERSION: &str = "mcqa-extract-v1";
pub const DEFAULT_QUERY_MAX_WORDS: usize = 512;
pub const DOCUMENTS_HEADER: &str = "Here are relevant documents:";

const PLACEHOLDER: &str = "{initial_query}";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Label {
    A,
    B,
    C,
    D,
}

impl Label {
    pub const ALL: [Label; 4] = [Label::A, Label::B, Label::C, Label::D];

    pub fn as_char(self) -> char {
        match self {
            Label::A => 'A',
            Label::B => 'B',
            Label::C => 'C',
            Label::D => 'D',
        }
    }

    pub fn from_char(c: char) -> Option<Self> {
        match c {
            'A' => Some(Label::A),
            'B' => Some(Label::B),
            'C' => Some(Label::C),
            'D' => Some(Label::D),
            _ => None,
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_char())
    }
}

/// Exactly four option texts, indexed by [`Label`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "std::collections::BTreeMap<String, String>")]
#[serde(into = "std::collections::BTreeMap<String, String>")]
pub struct Options([String; 4]);

impl Options {
    pub fn new(a: impl Into<String>, b: impl Into<String>, c: impl Into<String>, d: impl Into<String>) -> Self {
        Self([a.into(), b.into(), c.into(), d.into()])
    }

    pub fn get(&self, label: Label) -> &str {
        &self.0[label.index()]
    }

    pub fn iter(&self) -> impl Iterator<Item = (Label, &str)> {
        Label::ALL.into_iter().map(move |l| (l, self.get(l)))
    }
}

impl TryFrom<std::collections::BTreeMap<String, String>> for Options {
    type Error = String;

    fn try_from(map: std::collections::BTreeMap<String, String>) -> Result<Self, String> {
        let keys: Vec<&str> = map.keys().map(String::as_str).collect();
        if keys != ["A", "B", "C", "D"] {
            return Err(format!("options must be exactly A, B, C, D (got {keys:?})"));
        }
        let mut it = map.into_values();
        let mut next = || it.next().expect("four values");
        Ok(Self([next(), next(), next(), next()]))
    }
}

impl From<Options> for std::collections::BTreeMap<String, String> {
    fn from(o: Options) -> Self {
        Label::ALL
            .into_iter()
            .zip(o.0)
            .map(|(l, t)| (l.to_string(), t))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McqaItem {
    pub item_id: String,
    pub question: String,
    pub options: Options,
    pub gold: Label,
    #[serde(default)]
    pub dataset: String,
}

impl McqaItem {
    pub fn validate(&self) -> Result<()> {
        if self.question.trim().is_empty() {
            return Err(Error::invalid(format!("item {} has an empty question", self.item_id)));
        }
        if self.item_id.is_empty() {
            return Err(Error::invalid("item without item_id"));
        }
        Ok(())
    }

    /// Question followed by `"A. <text>"` option lines.
    pub fn initial_query(&self) -> String {
        let mut out = self.question.trim_end().to_string();
        for (label, text) in self.options.iter() {
            out.push_str(&format!("\n{label}. {text}"));
        }
        out
    }
}

/// A prompt template with one `{initial_query}` placeholder.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptTemplate {
    text: String,
    digest: String,
}

impl PromptTemplate {
    pub fn new(text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        if text.matches(PLACEHOLDER).count() != 1 {
            return Err(Error::Config(format!("template must contain {PLACEHOLDER} exactly once")));
        }
        let digest = sha256_hex(&text);
        Ok(Self { text, digest })
    }

    pub fn mcqa() -> Self {
        Self::new(MCQA_TEMPLATE_V1).expect("shipped template is valid")
    }

    pub fn longform() -> Self {
        Self::new(LONGFORM_TEMPLATE_V1).expect("shipped template is valid")
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::new(std::fs::read_to_string(path)?)
    }

    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    /// Renders the template, prefixed by a documents block when `snippets`
    /// is non-empty.
    pub fn render(&self, initial_query: &str, snippets: &[Snippet]) -> String {
        let mut out = String::new();
        if !snippets.is_empty() {
            out.push_str(DOCUMENTS_HEADER);
            out.push('\n');
            for s in snippets {
                out.push_str(&format!("[{}] {}\n", s.snippet_id, s.retrieval_text()));
            }
            out.push('\n');
        }
        out.push_str(&self.text.replacen(PLACEHOLDER, initial_query, 1));
        out
    }
}

pub fn build_cot_prompt(template: &PromptTemplate, item: &McqaItem, snippets: &[Snippet]) -> String {
    template.render(&item.initial_query(), snippets)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RationaleRecord {
    pub item_id: String,
    pub rationale_text: String,
    pub extracted_option: Option<Label>,
    pub with_snippets: Vec<String>,
    pub prompt_digest: String,
}

pub fn generate_rationale(
    provider: &dyn Provider,
    template: &PromptTemplate,
    item: &McqaItem,
    snippets: &[Snippet],
    max_tokens: u32,
) -> Result<RationaleRecord> {
    item.validate()?;
    let prompt = build_cot_prompt(template, item, snippets);
    let text = generate(provider, &GenerationRequest::greedy(prompt.clone(), max_tokens))?;
    if text.trim().is_empty() {
        return Err(Error::EmptyGeneration);
    }
    Ok(RationaleRecord {
        item_id: item.item_id.clone(),
        extracted_option: extract_answer(&text, &item.options),
        rationale_text: text,
        with_snippets: snippets.iter().map(|s| s.snippet_id.clone()).collect(),
        prompt_digest: sha256_hex(&prompt),
    })
}

static ANSWER_PATTERNS: LazyLock<[Regex; 3]> = LazyLock::new(|| {
    [
        Regex::new(r"\(([ABCD])\)").unwrap(),
        Regex::new(r"(?i:answer)\s+is\s*:?\s*\(?([ABCD])\b").unwrap(),
        Regex::new(r"(?i:answer)\s*:\s*\(?([ABCD])\b").unwrap(),
    ]
});

/// Last answer-pattern match: (match start, match end, label).
fn last_pattern_match(text: &str) -> Option<(usize, usize, Label)> {
    ANSWER_PATTERNS
        .iter()
        .flat_map(|re| re.captures_iter(text))
        .map(|caps| {
            let whole = caps.get(0).unwrap();
            let letter = caps.get(1).unwrap();
            let label = Label::from_char(letter.as_str().chars().next().unwrap()).unwrap();
            (letter.start(), whole.start(), whole.end(), label)
        })
        .max_by_key(|&(letter_pos, start, _, _)| (letter_pos, std::cmp::Reverse(start)))
        .map(|(_, start, end, label)| (start, end, label))
}

/// The option a generation commits to: the last `(X)`, `answer is X` or
/// `Answer: X`; failing that, the option whose exact text occurs last.
pub fn extract_answer(generation: &str, options: &Options) -> Option<Label> {
    if let Some((_, _, label)) = last_pattern_match(generation) {
        return Some(label);
    }
    options
        .iter()
        .filter(|(_, text)| !text.trim().is_empty())
        .filter_map(|(label, text)| generation.rfind(text.trim()).map(|pos| (pos, text.trim().len(), label)))
        .max_by_key(|&(pos, len, _)| (pos, len))
        .map(|(_, _, label)| label)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryOptions {
    /// Drop a trailing final-answer sentence before querying.
    #[serde(default = "default_true")]
    pub strip_answer: bool,
    #[serde(default = "default_max_words")]
    pub max_words: usize,
}

fn default_true() -> bool {
    true
}
fn default_max_words() -> usize {
    DEFAULT_QUERY_MAX_WORDS
}

impl Default for QueryOptions {
    fn default() -> Self {
        Self {
            strip_answer: true,
            max_words: DEFAULT_QUERY_MAX_WORDS,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RationaleQuery {
    pub text: String,
    pub fell_back_to_question: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

fn is_sentence_end(c: char) -> bool {
    matches!(c, '.' | '!' | '?' | '…' | '\n')
}

/// Text with a trailing answer sentence removed, if there is one.
fn strip_answer_sentence(text: &str) -> &str {
    let Some((start, end, _)) = last_pattern_match(text) else {
        return text;
    };
    let tail_is_trivial = text[end..]
        .chars()
        .all(|c| c.is_whitespace() || c.is_ascii_punctuation());
    if !tail_is_trivial {
        return text;
    }
    let head = &text[..start];
    let mut sentence_start = 0;
    let mut chars = head.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if is_sentence_end(c) {
            let next_is_space = chars.peek().is_none_or(|(_, n)| n.is_whitespace());
            if next_is_space || c == '\n' {
                sentence_start = i + c.len_utf8();
            }
        }
    }
    text[..sentence_start].trim_end()
}

fn head_words(text: &str, max_words: usize) -> &str {
    let mut count = 0;
    let mut in_word = false;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            if in_word {
                count += 1;
                if count == max_words {
                    return &text[..i];
                }
            }
            in_word = false;
        } else {
            in_word = true;
        }
    }
    text
}

/// Retrieval query built from the rationale alone; the question is used only
/// as a fallback when nothing is left after stripping.
pub fn rationale_query(record: &RationaleRecord, question: &str, opts: QueryOptions) -> Result<RationaleQuery> {
    if record.rationale_text.trim().is_empty() {
        return Err(Error::invalid("rationale is empty"));
    }
    let body = if opts.strip_answer {
        strip_answer_sentence(&record.rationale_text)
    } else {
        record.rationale_text.as_str()
    };
    let body = body.trim();
    if body.is_empty() {
        return Ok(RationaleQuery {
            text: head_words(question.trim(), opts.max_words.max(1)).to_string(),
            fell_back_to_question: true,
            warning: Some(format!(
                "rationale for {} is empty after stripping the answer sentence; querying with the question",
                record.item_id
            )),
        });
    }
    Ok(RationaleQuery {
        text: head_words(body, opts.max_words.max(1)).to_string(),
        fell_back_to_question: false,
        warning: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn item() -> McqaItem {
        McqaItem {
            item_id: "q1".into(),
            question: "A 60-year-old smoker presents with dyspnea. Best next step?".into(),
            options: Options::new("Spirometry", "Chest CT", "Bronchoscopy", "Observation"),
            gold: Label::A,
            dataset: "fixture".into(),
        }
    }

    fn record(text: &str) -> RationaleRecord {
        RationaleRecord {
            item_id: "q1".into(),
            rationale_text: text.into(),
            extracted_option: None,
            with_snippets: vec![],
            prompt_digest: String::new(),
        }
    }

    fn snippet(id: &str, text: &str) -> Snippet {
        let (corpus_id, doc_id, seq) = crate::corpus::parse_snippet_id(id).unwrap();
        Snippet {
            snippet_id: id.into(),
            corpus_id,
            doc_id,
            seq,
            title: None,
            text: text.into(),
            span: (0, text.len()),
        }
    }

    #[test]
    fn closed_book_prompt_is_template_verbatim() {
        let prompt = build_cot_prompt(&PromptTemplate::mcqa(), &item(), &[]);
        assert!(prompt.starts_with("The following are multiple choice questions about medical knowledge."));
        assert!(prompt.contains(
            "Solve them in a step-by-step fashion, starting by summarizing the available information. \
             Output your explanation and single option from the given options as the final answer.\n\
             Here is the question: A 60-year-old smoker"
        ));
        assert!(prompt.ends_with("\nA. Spirometry\nB. Chest CT\nC. Bronchoscopy\nD. Observation\n"));
    }

    #[test]
    fn snippets_prepended_in_order() {
        let s = [snippet("pubmed/1#0", "first"), snippet("pmc/9#2", "second")];
        let prompt = build_cot_prompt(&PromptTemplate::mcqa(), &item(), &s);
        assert!(prompt.starts_with("Here are relevant documents:\n[pubmed/1#0] first\n[pmc/9#2] second\n\nThe following"));
    }

    #[test]
    fn prompts_differ_only_in_changed_option() {
        let a = item();
        let mut b = item();
        b.options = Options::new("Spirometry", "Chest CT", "Bronchoscopy", "Watchful waiting");
        let pa = build_cot_prompt(&PromptTemplate::mcqa(), &a, &[]);
        let pb = build_cot_prompt(&PromptTemplate::mcqa(), &b, &[]);
        let diff: Vec<(&str, &str)> = pa.lines().zip(pb.lines()).filter(|(x, y)| x != y).collect();
        assert_eq!(diff, vec![("D. Observation", "D. Watchful waiting")]);
    }

    #[test]
    fn template_needs_one_placeholder() {
        assert!(PromptTemplate::new("no placeholder").is_err());
        assert!(PromptTemplate::new("{initial_query} {initial_query}").is_err());
    }

    #[test]
    fn extraction_patterns() {
        let o = item().options;
        assert_eq!(extract_answer("…so the answer is (C).", &o), Some(Label::C));
        assert_eq!(extract_answer("Options A and B are wrong; D is correct. Answer: D", &o), Some(Label::D));
        assert_eq!(extract_answer("The answer is: B", &o), Some(Label::B));
        assert_eq!(extract_answer("Maybe (A), but final (B)", &o), Some(Label::B));
        assert_eq!(extract_answer("the answer is Ampicillin", &o), None);
        assert_eq!(extract_answer("", &o), None);
    }

    #[test]
    fn verbatim_option_fallback() {
        let o = item().options;
        assert_eq!(extract_answer("Chest CT", &o), Some(Label::B));
        assert_eq!(extract_answer("Not Observation; Spirometry first.", &o), Some(Label::A));
        assert_eq!(extract_answer("no idea", &o), None);
    }

    #[test]
    fn strips_trailing_answer_sentence() {
        let q = rationale_query(&record("The patient has COPD… The answer is (A)."), "Q?", QueryOptions::default()).unwrap();
        assert_eq!(q.text, "The patient has COPD…");
        assert!(!q.fell_back_to_question);

        let keep = QueryOptions {
            strip_answer: false,
            ..QueryOptions::default()
        };
        let q = rationale_query(&record("The patient has COPD. The answer is (A)."), "Q?", keep).unwrap();
        assert_eq!(q.text, "The patient has COPD. The answer is (A).");
    }

    #[test]
    fn answer_only_rationale_falls_back() {
        let q = rationale_query(&record("The answer is (A)."), "What is COPD?", QueryOptions::default()).unwrap();
        assert_eq!(q.text, "What is COPD?");
        assert!(q.fell_back_to_question);
        assert!(q.warning.is_some());
    }

    #[test]
    fn mid_text_option_mention_not_stripped() {
        let text = "Option (B) is tempting. However spirometry confirms obstruction";
        let q = rationale_query(&record(text), "Q", QueryOptions::default()).unwrap();
        assert_eq!(q.text, text);
    }

    #[test]
    fn head_truncates_to_word_limit() {
        let text: String = (0..1200).map(|i| format!("w{i} ")).collect();
        let opts = QueryOptions {
            strip_answer: true,
            max_words: 512,
        };
        let q = rationale_query(&record(&text), "Q", opts).unwrap();
        let words: Vec<&str> = q.text.split_whitespace().collect();
        assert_eq!(words.len(), 512);
        assert_eq!(words[0], "w0");
        assert_eq!(words[511], "w511");
    }

    #[test]
    fn item_json_requires_four_options() {
        let ok = r#"{"item_id":"1","question":"q","options":{"A":"a","B":"b","C":"c","D":"d"},"gold":"C"}"#;
        let item: McqaItem = serde_json::from_str(ok).unwrap();
        assert_eq!(item.gold, Label::C);
        assert_eq!(item.options.get(Label::C), "c");
        let three = r#"{"item_id":"1","question":"q","options":{"A":"a","B":"b","C":"c"},"gold":"C"}"#;
        assert!(serde_json::from_str::<McqaItem>(three).is_err());
        let bad_gold = r#"{"item_id":"1","question":"q","options":{"A":"a","B":"b","C":"c","D":"d"},"gold":"E"}"#;
        assert!(serde_json::from_str::<McqaItem>(bad_gold).is_err());
    }
}
